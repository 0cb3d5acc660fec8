"""Loop-by-loop reference formulas, written without the vectorised kernels."""
import math


def _logits(s, W, B):
    return [[sum(W[c][a] * s[i][a] for a in range(len(s[i]))) + B[c] for c in range(len(W))]
            for i in range(len(s))]


def _lse(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def pd(s, t, W, B, tau=1.0):
    zs, M, C = _logits(s, W, B), len(s), len(W)
    total = 0.0
    for i in range(M):
        den_t = _lse([t[i][k] / tau for k in range(C)])
        den_s = _lse([zs[i][k] / tau for k in range(C)])
        for c in range(C):
            p = math.exp(t[i][c] / tau - den_t)
            total -= p * (zs[i][c] / tau - den_s)
    return tau**2 * total / M


def cwd(s, t, W, B, tau):
    zs, M, C = _logits(s, W, B), len(s), len(W)
    total = 0.0
    for c in range(C):
        den_t = _lse([t[k][c] / tau for k in range(M)])
        den_s = _lse([zs[k][c] / tau for k in range(M)])
        for i in range(M):
            p = math.exp(t[i][c] / tau - den_t)
            total -= p * (zs[i][c] / tau - den_s)
    return tau**2 * total / C


def quad(u, S, v):
    return sum(u[a] * S[a][b] * v[b] for a in range(len(u)) for b in range(len(v)))


def aug_pd(s, t, W, B, covs, lam, classes, tau=1.0, denom="tau_squared"):
    M, C, A = len(s), len(W), len(W[0])
    coef = lam / (tau**2 if denom == "tau_squared" else tau)
    total = 0.0
    for i in range(M):
        den_t = _lse([t[i][k] / tau for k in range(C)])
        S = covs[classes[i]]
        for c in range(C):
            p = math.exp(t[i][c] / tau - den_t)
            terms = []
            for k in range(C):
                d = [W[k][a] - W[c][a] for a in range(A)]
                mean = (sum(d[a] * s[i][a] for a in range(A)) + B[k] - B[c]) / tau
                terms.append(mean + 0.5 * coef * quad(d, S, d))
            total += p * _lse(terms)
    return tau**2 * total / M


def aug_cwd(s, t, W, B, covs, lam, classes, tau, mode="paper_form", denom="tau_squared"):
    M, C, A = len(s), len(W), len(W[0])
    coef = lam / (tau**2 if denom == "tau_squared" else tau)
    total = 0.0
    for c in range(C):
        den_t = _lse([t[k][c] / tau for k in range(M)])
        w = W[c]
        for i in range(M):
            p = math.exp(t[i][c] / tau - den_t)
            terms = []
            for k in range(M):
                if mode == "exact_diagonal" and k == i:
                    terms.append(0.0)
                    continue
                mean = sum(w[a] * (s[k][a] - s[i][a]) for a in range(A)) / tau
                var = coef * (quad(w, covs[classes[i]], w) + quad(w, covs[classes[k]], w))
                terms.append(mean + 0.5 * var)
            total += p * _lse(terms)
    return tau**2 * total / C


def ce(s, W, B, labels, ignore=255):
    zs = _logits(s, W, B)
    total, n = 0.0, 0
    for i, y in enumerate(labels):
        if y == ignore:
            continue
        total += _lse(zs[i]) - zs[i][y]
        n += 1
    return total / n
