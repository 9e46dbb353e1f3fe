"""Independent reference implementations written as plain scalar loops."""

import math

import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def hfw_loop(x, p, heads, eta_max=1.0, delta=1.0, eps=1e-6, mem=None, gate_override=None, ln_eps=1e-5):
    """Fast-weight forward for ``x`` (B×N×d) with parameters ``p`` given as
    numpy arrays (projections input-major). Returns (out, memory)."""
    b_sz, n_tok, d = x.shape
    dh = d // heads
    eta = eta_max * sigmoid(float(p["eta_logit"]))
    lam = sigmoid(float(p["lambda_logit"]))
    out = np.zeros((b_sz, n_tok, d))
    new_mem = np.zeros((b_sz, heads, dh, dh))
    for b in range(b_sz):
        r = np.zeros((n_tok, d))
        for h in range(heads):
            cols = range(h * dh, (h + 1) * dh)

            def proj(w):
                res = [[0.0] * dh for _ in range(n_tok)]
                for n in range(n_tok):
                    for jj, j in enumerate(cols):
                        s = 0.0
                        for i in range(d):
                            s += x[b, n, i] * w[i, j]
                        res[n][jj] = s
                return res

            k, v, q = proj(p["w_k"]), proj(p["w_v"]), proj(p["w_q"])
            raw = [[0.0] * dh for _ in range(dh)]
            for i in range(dh):
                for j in range(dh):
                    s = 0.0
                    for n in range(n_tok):
                        s += k[n][i] * v[n][j]
                    a = min(max(s / math.sqrt(n_tok), -delta), delta)
                    prev = 0.0 if mem is None else mem[b, h, i, j]
                    raw[i][j] = lam * prev + eta * a
            norm = math.sqrt(sum(raw[i][j] ** 2 for i in range(dh) for j in range(dh)))
            for i in range(dh):
                for j in range(dh):
                    new_mem[b, h, i, j] = raw[i][j] / (norm + eps)
            for n in range(n_tok):
                for jj, j in enumerate(cols):
                    s = 0.0
                    for i in range(dh):
                        s += q[n][i] * new_mem[b, h, i, jj]
                    r[n, j] = s
        for n in range(n_tok):
            y = [0.0] * d
            for c in range(d):
                if gate_override is None:
                    z = 0.0
                    for i in range(d):
                        z += x[b, n, i] * p["w_g"][i, c]
                    g = sigmoid(z)
                else:
                    g = gate_override
                y[c] = g * r[n, c]
            mu = sum(y) / d
            var = sum((yc - mu) ** 2 for yc in y) / d
            for c in range(d):
                out[b, n, c] = (y[c] - mu) / math.sqrt(var + ln_eps) * p["gamma"][c] + p["beta"][c]
    return out, new_mem


def confusion_metrics(preds, labels, n_way):
    """Accuracy and macro precision/recall/F1 from an explicit confusion matrix."""
    cm = [[0] * n_way for _ in range(n_way)]
    for p, t in zip(preds, labels):
        cm[t][p] += 1
    prec, rec, f1 = [], [], []
    for c in range(n_way):
        tp = cm[c][c]
        pred_c = sum(cm[t][c] for t in range(n_way))
        true_c = sum(cm[c])
        pc = tp / pred_c if pred_c else 0.0
        rc = tp / true_c if true_c else 0.0
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
    acc = sum(cm[c][c] for c in range(n_way)) / len(labels)
    return acc, sum(prec) / n_way, sum(rec) / n_way, sum(f1) / n_way


def adam_loop(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain Adam over a sequence of gradient vectors, element by element."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return theta
