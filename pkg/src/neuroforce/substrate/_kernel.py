"""Fixed-step AdExp integration loop, compiled with numba.

Membrane quantities are in normalized units with conductances per
millisecond; all time arguments arrive here already in milliseconds.
"""

import math

import numpy as np
from numba import njit

# exponent cap for the spike-initiation term; V is reset well before this matters
_EXP_CAP = 30.0


@njit(cache=True)
def _grow(buf, n):
    out = np.empty(max(2 * buf.size, n), dtype=buf.dtype)
    out[:buf.size] = buf
    return out


@njit(cache=True)
def run_adex(n_steps, dt_ms,
             C, g_L, E_L, V_T, Delta_T, V_peak, V_reset, a, b, tau_w_ms, refr_steps,
             gain, sign, syn_decay,
             ev_step, ev_src, in_counts, rec_counts,
             noise_sigma, seed, v_trace_neuron, V0, w0):
    """Integrate ``N`` neurons for ``n_steps`` steps.

    gain, syn_decay: [N, 4]; in_counts: [n_in, N, 4]; rec_counts: [N, N, 4]
    (presynaptic neuron first). ev_step / ev_src: events pre-binned to steps,
    sorted by step. Returns (spike_neuron, spike_step, n_spikes, status,
    v_final, v_trace) where status 0 is success and status 1 flags a
    non-finite state.
    """
    np.random.seed(seed)
    N = C.size
    V = V0.copy()
    w = w0.copy()
    s = np.zeros((N, 4))
    refr = np.zeros(N, dtype=np.int64)
    fired = np.zeros(N, dtype=np.bool_)
    leak_decay = np.exp(-dt_ms * g_L / C)
    w_decay = np.exp(-dt_ms / tau_w_ms)
    use_rec = rec_counts.shape[0] > 0
    use_noise = False
    for j in range(N):
        if noise_sigma[j] > 0.0:
            use_noise = True

    cap = 1024
    spk_n = np.empty(cap, dtype=np.int64)
    spk_t = np.empty(cap, dtype=np.int64)
    n_spk = 0
    v_trace = np.empty(n_steps if v_trace_neuron >= 0 else 0)
    e = 0
    n_ev = ev_step.size
    status = 0

    for k in range(n_steps):
        while e < n_ev and ev_step[e] == k:
            src = ev_src[e]
            for j in range(N):
                for q in range(4):
                    s[j, q] += in_counts[src, j, q]
            e += 1
        if use_rec:
            for p in range(N):
                if fired[p]:
                    for j in range(N):
                        for q in range(4):
                            s[j, q] += rec_counts[p, j, q]
        for j in range(N):
            fired[j] = False
            I = 0.0
            for q in range(4):
                I += sign[q] * gain[j, q] * s[j, q]
            if use_noise:
                I += noise_sigma[j] * np.random.standard_normal()
            w_inf = a[j] * (V[j] - E_L[j])
            if refr[j] > 0:
                refr[j] -= 1
                V[j] = V_reset[j]
            else:
                x = (V[j] - V_T[j]) / Delta_T[j]
                if x > _EXP_CAP:
                    x = _EXP_CAP
                drive = g_L[j] * Delta_T[j] * math.exp(x) - w[j] + I
                v_inf = E_L[j] + drive / g_L[j]
                V[j] = v_inf + (V[j] - v_inf) * leak_decay[j]
                if V[j] >= V_peak[j]:
                    V[j] = V_reset[j]
                    w[j] += b[j]
                    refr[j] = refr_steps[j]
                    fired[j] = True
                    if n_spk >= spk_n.size:
                        spk_n = _grow(spk_n, n_spk + 1)
                        spk_t = _grow(spk_t, n_spk + 1)
                    spk_n[n_spk] = j
                    spk_t[n_spk] = k + 1
                    n_spk += 1
            w[j] = w_inf + (w[j] - w_inf) * w_decay[j]
            if not (math.isfinite(V[j]) and math.isfinite(w[j])):
                status = 1
            for q in range(4):
                s[j, q] *= syn_decay[j, q]
        if v_trace_neuron >= 0:
            v_trace[k] = V[v_trace_neuron]
        if status != 0:
            break
    return spk_n[:n_spk], spk_t[:n_spk], n_spk, status, V, v_trace
