"""Pure-numpy GRU recurrence kernels (fallback for the compiled ``_gru_kernels``).

Both kernels work time-major. The input projection ``x @ W + b`` is computed
outside the recurrence, so only the ``h @ U`` part lives in the loop.

Gate layout along the last axis is ``[z | r | c]`` (update, reset, candidate)::

    z = sigmoid(xw_z + h_prev @ U_z)
    r = sigmoid(xw_r + h_prev @ U_r)
    c = tanh(xw_c + (r * h_prev) @ U_c)
    h = (1 - z) * h_prev + z * c
"""

import numpy as np


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def gru_forward(xw, u):
    """Run the recurrence from a zero initial state.

    Parameters
    ----------
    xw : ndarray, shape (T, N, 3d)
        Input projections including biases.
    u : ndarray, shape (d, 3d)
        Recurrent weights.

    Returns
    -------
    h : ndarray, shape (T, N, d)
        Hidden state after every step.
    gates : ndarray, shape (T, N, 3d)
        Post-activation ``z``, ``r``, ``c`` (kept for the backward pass).
    """
    steps, n, d3 = xw.shape
    d = d3 // 3
    h = np.empty((steps, n, d))
    gates = np.empty((steps, n, d3))
    h_prev = np.zeros((n, d))
    u_zr = u[:, : 2 * d]
    u_c = u[:, 2 * d :]
    for t in range(steps):
        zr = _sigmoid(xw[t, :, : 2 * d] + h_prev @ u_zr)
        z = zr[:, :d]
        r = zr[:, d:]
        c = np.tanh(xw[t, :, 2 * d :] + (r * h_prev) @ u_c)
        h_prev = (1.0 - z) * h_prev + z * c
        h[t] = h_prev
        gates[t, :, : 2 * d] = zr
        gates[t, :, 2 * d :] = c
    return h, gates


def gru_backward(dh, h, gates, u):
    """Backpropagate through time.

    ``dh`` is the gradient w.r.t. every hidden state ``h[t]`` coming from
    outside the recurrence. Returns the gradient w.r.t. the gate
    pre-activations, shape (T, N, 3d); weight gradients are reductions of it
    and are formed by the caller.
    """
    steps, n, d = dh.shape
    da = np.empty((steps, n, 3 * d))
    carry = np.zeros((n, d))
    u_z = u[:, :d]
    u_r = u[:, d : 2 * d]
    u_c = u[:, 2 * d :]
    zeros = np.zeros((n, d))
    for t in range(steps - 1, -1, -1):
        h_prev = h[t - 1] if t > 0 else zeros
        z = gates[t, :, :d]
        r = gates[t, :, d : 2 * d]
        c = gates[t, :, 2 * d :]
        g = dh[t] + carry
        da_c = g * z * (1.0 - c * c)
        da_z = g * (c - h_prev) * z * (1.0 - z)
        d_rh = da_c @ u_c.T
        da_r = d_rh * h_prev * r * (1.0 - r)
        carry = g * (1.0 - z) + d_rh * r + da_z @ u_z.T + da_r @ u_r.T
        da[t, :, :d] = da_z
        da[t, :, d : 2 * d] = da_r
        da[t, :, 2 * d :] = da_c
    return da
