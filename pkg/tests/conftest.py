import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from ridepool.network import Edge, Network, TravelTimeMatrix  # noqa: E402

# acceptance criteria report their verdicts here; printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def random_network(rng: random.Random, n_nodes: int, extra_arcs: int = 4, max_time: int = 5) -> Network:
    """Strongly connected random digraph: a shuffled ring plus random chords."""
    nodes = list(range(n_nodes))
    order = nodes[:]
    rng.shuffle(order)
    edges = []
    for a, b in zip(order, order[1:] + order[:1]):
        if a != b:
            edges.append(Edge(a, b, float(rng.randint(1, max_time)), float(rng.randint(1, 9) * 100)))
    for _ in range(extra_arcs):
        a, b = rng.sample(nodes, 2)
        edges.append(Edge(a, b, float(rng.randint(1, max_time)), float(rng.randint(1, 9) * 100)))
    return Network(nodes, edges)


def random_matrix(rng: random.Random, n_nodes: int, **kw) -> TravelTimeMatrix:
    return TravelTimeMatrix(random_network(rng, n_nodes, **kw))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
