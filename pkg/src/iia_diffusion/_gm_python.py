"""Pure-numpy Gaussian-mixture posterior kernel (fallback backend)."""

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def gm_posterior(z, means, log_w, scales2, alpha, sigma):
    """Log density, score, posterior mean and responsibilities of a noisy GM.

    The noisy marginal is ``sum_k w_k N(z | alpha mu_k, v_k I)`` with
    ``v_k = alpha^2 s_k^2 + sigma^2``.

    Args:
        z: ``(B, d)`` states.
        means: ``(K, d)`` component means.
        log_w: ``(B, K)`` per-sample log weights (``-inf`` disables a component).
        scales2: ``(K,)`` squared component scales.
        alpha, sigma: Noise levels.

    Returns:
        ``(logp (B,), score (B, d), denoised (B, d), resp (B, K))``.
    """
    B, d = z.shape
    var = alpha * alpha * scales2 + sigma * sigma
    live = var > 0.0
    safe_var = np.where(live, var, 1.0)
    diff = z[:, None, :] - alpha * means[None, :, :]
    sq = np.zeros(diff.shape[:2])
    for j in range(d):
        sq += diff[:, :, j] * diff[:, :, j]
    logits = log_w - 0.5 * sq / safe_var - 0.5 * d * (LOG_2PI + np.log(safe_var))
    logits = np.where(live, logits, -np.inf)
    shift = logits.max(axis=1)
    expo = np.exp(logits - shift[:, None])
    total = expo.sum(axis=1)
    logp = shift + np.log(total)
    resp = expo / total[:, None]
    # per-component posterior mean mu_k + alpha s_k^2 (z - alpha mu_k) / v_k
    gain = np.where(live, alpha * scales2 / safe_var, 0.0)
    inv = np.where(live, 1.0 / safe_var, 0.0)
    score = np.zeros((B, d))
    denoised = np.zeros((B, d))
    for k in range(means.shape[0]):
        rk = resp[:, k : k + 1]
        score -= rk * (diff[:, k, :] * inv[k])
        denoised += rk * (means[k] + gain[k] * diff[:, k, :])
    return logp, score, denoised, resp
