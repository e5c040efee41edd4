"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written the slow, obvious way (python loops,
explicit DFT matrices, direct counting) so the package's vectorized code paths
are checked against a second route, not against themselves.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# gradients


def central_difference(f, x, indices, h=1e-5):
    """Central finite differences of scalar f at selected flat indices of x."""
    out = []
    for i in indices:
        xp = np.array(x, dtype=np.float64)
        xm = np.array(x, dtype=np.float64)
        xp.flat[i] += h
        xm.flat[i] -= h
        out.append((f(xp) - f(xm)) / (2.0 * h))
    return np.asarray(out)


def relative_error(a, b):
    """|a-b| with a guarded denominator so near-zero gradients stay meaningful."""
    return abs(a - b) / max(1.0, abs(a), abs(b))


# ---------------------------------------------------------------------------
# convolution


def conv2d_loops(x, kernel, padding):
    """Nested-loop cross-correlation. x (C,H,W), kernel (O,C,k,k)."""
    c_in, h, w = x.shape
    c_out, c_in2, kh, kw = kernel.shape
    assert c_in == c_in2 and kh == kw
    p = padding
    xp = np.zeros((c_in, h + 2 * p, w + 2 * p))
    xp[:, p:p + h, p:p + w] = x
    ho = h + 2 * p - kh + 1
    wo = w + 2 * p - kw + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i + u, j + v] * kernel[o, c, u, v]
                out[o, i, j] = acc
    return out


def conv1d_loops(x, kernel, dilation):
    """Nested-loop dilated 1-D convolution. x (T,Din), kernel (Dout,Din,k)."""
    t, d_in = x.shape
    d_out, d_in2, k = kernel.shape
    assert d_in == d_in2
    t_out = t - (k - 1) * dilation
    assert t_out >= 1
    out = np.zeros((t_out, d_out))
    for i in range(t_out):
        for o in range(d_out):
            acc = 0.0
            for j in range(k):
                for c in range(d_in):
                    acc += x[i + j * dilation, c] * kernel[o, c, j]
            out[i, o] = acc
    return out


# ---------------------------------------------------------------------------
# spectral features


def dft_naive(frame, n_fft):
    """O(N^2) DFT via an explicit complex-exponential matrix."""
    padded = np.zeros(n_fft)
    padded[:len(frame)] = frame
    n = np.arange(n_fft)
    basis = np.exp(-2j * np.pi * np.outer(n, n) / n_fft)
    return basis.T @ padded


def hanning_formula(length):
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (length - 1)))


def stft_logpower_loops(wave, win_len, hop, n_fft, n_bins, max_frames, floor):
    """Frame-by-frame log-power spectrogram using the naive DFT."""
    n_frames = (len(wave) - win_len) // hop + 1
    n_frames = min(n_frames, max_frames)
    window = hanning_formula(win_len)
    rows = []
    for t in range(n_frames):
        frame = wave[t * hop:t * hop + win_len] * window
        spec = dft_naive(frame, n_fft)[:n_bins]
        rows.append(np.log(np.abs(spec) ** 2 + floor))
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# detection metrics


def _det_points_loops(pos, neg):
    """Threshold-consistent DET points by direct counting at each candidate.

    Candidates are the distinct scores ascending plus one above the max, with
    the accept-iff-score>=threshold convention. Returns (thresholds, far, frr).
    """
    cand = sorted(set(list(pos) + list(neg)))
    cand = cand + [cand[-1] + 1.0]
    far, frr = [], []
    for t in cand:
        far.append(sum(1 for s in neg if s >= t) / len(neg))
        frr.append(sum(1 for s in pos if s < t) / len(pos))
    return cand, far, frr


def eer_reference(pos, neg):
    """EER and threshold under the exact-crossing-else-interpolate convention."""
    cand, far, frr = _det_points_loops(pos, neg)
    for t, fa, fr in zip(cand, far, frr):
        if fa == fr:
            return fa, t
    for i in range(1, len(cand)):
        d0 = far[i - 1] - frr[i - 1]
        d1 = far[i] - frr[i]
        if d0 > 0.0 and d1 < 0.0:
            u = d0 / (d0 - d1)
            eer = frr[i - 1] + u * (frr[i] - frr[i - 1])
            thr = cand[i - 1] if abs(d0) <= abs(d1) else cand[i]
            return eer, thr
    raise AssertionError("no crossing found")


def tdcf_reference(bona_cm, spoof_cm, tar_asv, non_asv, spoof_asv, cost):
    """Minimum normalized tandem detection cost, ASV fixed at its EER point.

    cost: mapping with p_target, p_nontarget, p_spoof, c_miss_asv, c_fa_asv,
    c_miss_cm, c_fa_cm.
    """
    _, asv_thr = eer_reference(tar_asv, non_asv)
    p_fa_asv = sum(1 for s in non_asv if s >= asv_thr) / len(non_asv)
    p_miss_asv = sum(1 for s in tar_asv if s < asv_thr) / len(tar_asv)
    p_miss_spoof = sum(1 for s in spoof_asv if s < asv_thr) / len(spoof_asv)

    c1 = cost["p_target"] * (cost["c_miss_cm"] - cost["c_miss_asv"] * p_miss_asv) \
        - cost["p_nontarget"] * cost["c_fa_asv"] * p_fa_asv
    c2 = cost["c_fa_cm"] * cost["p_spoof"] * (1.0 - p_miss_spoof)
    assert c1 > 0.0 and c2 > 0.0

    cand = sorted(set(list(bona_cm) + list(spoof_cm)))
    cand = cand + [cand[-1] + 1.0]
    best = None
    for t in cand:
        p_miss_cm = sum(1 for s in bona_cm if s < t) / len(bona_cm)
        p_fa_cm = sum(1 for s in spoof_cm if s >= t) / len(spoof_cm)
        val = (c1 * p_miss_cm + c2 * p_fa_cm) / min(c1, c2)
        if best is None or val < best:
            best = val
    return best


# ---------------------------------------------------------------------------
# optimizer


def adam_reference(grad_fn, w0, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain transcription of the Adam update run for a fixed number of steps."""
    w = np.array(w0, dtype=np.float64)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w


# ---------------------------------------------------------------------------
# trial protocol


def trials_reference(records, n_enroll):
    """Expected eval trials by brute-force enumeration over manifest records.

    records: iterable of (utterance_id, speaker_id, label, partition).
    Returns (enroll_map, target_set, nontarget_set, spoof_set) where the trial
    sets contain (claimed_speaker, utterance_id) pairs.
    """
    bona_eval = {}
    spoof_eval = []
    for utt, spk, label, part in records:
        if part != "eval":
            continue
        if label == "bonafide":
            bona_eval.setdefault(spk, []).append(utt)
        else:
            spoof_eval.append((spk, utt))
    enroll = {spk: utts[:n_enroll] for spk, utts in bona_eval.items()}
    test = {spk: utts[n_enroll:] for spk, utts in bona_eval.items()}
    speakers = sorted(bona_eval)
    target = {(s, u) for s in speakers for u in test[s]}
    nontarget = {(s, u) for s in speakers for s2 in speakers if s2 != s
                 for u in test[s2]}
    spoof = set(spoof_eval)
    return enroll, target, nontarget, spoof


def sigmoid_reference(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)
