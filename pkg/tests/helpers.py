import numpy as np


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at flat array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        up = f(x)
        x.flat[i] = old - h
        down = f(x)
        x.flat[i] = old
        g.flat[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# acceptance results, printed by the terminal-summary hook in conftest
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append((criterion, bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok
