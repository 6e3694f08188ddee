"""Plain-Python recomputation of the ratio agent, written without numpy or the library's classes."""
import math


class ScriptedRng:
    """Stands in for a numpy Generator: ``integers`` and ``uniform`` follow a script."""

    def __init__(self, indices, fractions):
        self.indices = list(indices)
        self.fractions = list(fractions)

    def integers(self, n):
        return self.indices.pop(0)

    def uniform(self, lo, hi):
        return lo + self.fractions.pop(0) * (hi - lo)


def U(a):
    return 10.0 - 20.0 / (1.0 + math.exp(0.35 * a))


def replay(i0, s_min, rounds, clients, fraction, rho, a0, feedback, first_index, fractions,
           delta=0.0):
    """Return one dict per step with rewards, means, variances, scores and the selection."""
    step = (1.0 - s_min) / i0
    edges = [s_min + i * step for i in range(i0)] + [1.0]
    parts = [[edges[i], edges[i + 1], []] for i in range(i0)]
    xi = rounds / (clients * fraction)
    eps = 1.0
    fr = list(fractions)
    lo, hi = parts[first_index][0], parts[first_index][1]
    s = lo + fr.pop(0) * (hi - lo)
    a_prev = a0
    trace = []
    for acc, t in feedback:
        u = next(i for i, p in enumerate(parts) if p[0] <= s < p[1])
        lo, hi, hist = parts[u]
        low_piece = [lo, s, list(hist)] if s > lo else None
        high_piece = [s, hi, list(hist)]
        dropped = acc - a_prev < delta and low_piece is not None
        new = [high_piece] if dropped or low_piece is None else [low_piece, high_piece]
        parts = parts[:u] + new + parts[u + 1:]
        eps = eps / 2.0
        psi = xi / len(parts) ** 2
        g = (U(acc) - U(a_prev)) / t
        for p in new:
            p[2].append(g)
        lg = math.log(xi * psi * eps)
        means, variances, scores = [], [], []
        for p in parts:
            n = len(p[2])
            m = sum(p[2]) / n if n else 0.0
            v = sum((x - m) ** 2 for x in p[2]) / n if n else 0.0
            rad = rho * (v + 2.0) * lg / (4.0 * (n + 1))
            means.append(m)
            variances.append(v)
            scores.append(m + (math.sqrt(rad) if rad > 0 else 0.0))
        best = 0
        for i in range(1, len(scores)):
            if scores[i] > scores[best]:
                best = i
        lo, hi = parts[best][0], parts[best][1]
        s = lo + fr.pop(0) * (hi - lo)
        trace.append({"reward": g, "eliminated": dropped, "means": means, "variances": variances,
                      "scores": scores, "selected": best, "ratio": s, "epsilon": eps,
                      "bounds": [(p[0], p[1]) for p in parts]})
        a_prev = acc
    return trace


# 8 rounds of (accuracy percent, local time).  Accuracies sit on the steep part of
# the utility curve so the rewards are large enough to move the scores.
SCRIPT_FEEDBACK = [(2.0, 0.5), (4.0, 0.8), (3.0, 0.4), (3.5, 1.0), (6.0, 0.3), (5.0, 0.6),
                   (5.0, 0.7), (9.0, 0.2)]
SCRIPT_FRACTIONS = [0.5, 0.3, 0.7, 0.25, 0.9, 0.6, 0.1, 0.45, 0.8]
SCRIPT_ARGS = dict(i0=4, s_min=0.05, rounds=100, clients=100, fraction=0.1, rho=0.5, a0=1.0)
