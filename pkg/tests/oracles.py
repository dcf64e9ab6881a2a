"""Independent reference implementations shared by unit and acceptance tests."""
import numpy as np

from hyperlista.thresholding import top_p_support


def five_case(v, theta, p):
    """Entry-by-entry reference written straight from the case table."""
    S = set(top_p_support(v, p))
    out = []
    for i, vi in enumerate(v):
        if vi > theta and i in S:
            out.append(vi)
        elif vi > theta:
            out.append(vi - theta)
        elif -theta <= vi <= theta:
            out.append(0.0)
        elif i not in S:
            out.append(vi + theta)
        else:
            out.append(vi)
    return np.array(out)


def closed_form_weight(A):
    """Minimizer of ||W^T A||_F^2 subject to diag(W^T A) = 1, column by column."""
    M = np.linalg.solve(A @ A.T, A)
    return M / np.sum(A * M, axis=0)


def coherence_objective(W, A):
    R = W.T @ A - np.eye(A.shape[1])
    return float(np.sum(R * R))
