"""Detection metrics and system-level evaluation for the cascade.

Scoring conventions, used consistently everywhere:

* a trial is accepted iff score >= threshold;
* candidate thresholds are the distinct observed scores ascending plus one
  value above the maximum, so every achievable operating point is swept;
* the detector score of an utterance is P(bonafide); the verifier score of a
  trial is the cosine between the claimed speaker's enrollment mean and the
  test embedding;
* the joint score of a trial is its verifier score when the detector accepts
  the utterance and a rejection sentinel otherwise. The sentinel is None in
  memory and "-inf" in score files, and sweeps place it strictly below every
  finite score.

EER is read off the DET points: if some candidate threshold hits
FAR == FRR exactly that value is the EER, otherwise the rate curves are
interpolated linearly between the two candidates where FAR - FRR changes
sign. min t-DCF follows the tandem cost model with the verifier pinned at
its own EER threshold.
"""

import dataclasses
import json

import numpy as np

from . import models

SENTINEL_TOKEN = "-inf"
REPORT_VERSION = 1


def _as_scores(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name}: need a non-empty 1-D score array")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: scores must be finite")
    return arr


def det_points(pos, neg):
    """Candidate thresholds with FAR and FRR at each, accept iff >= t."""
    pos = _as_scores(pos, "pos")
    neg = _as_scores(neg, "neg")
    cand = np.unique(np.concatenate([pos, neg]))
    cand = np.append(cand, cand[-1] + 1.0)
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    far = (neg.size - np.searchsorted(neg_sorted, cand, side="left")) / neg.size
    frr = np.searchsorted(pos_sorted, cand, side="left") / pos.size
    return cand, far, frr


def compute_eer(pos, neg):
    """Equal error rate and its operating threshold.

    Returns the exact candidate value when some threshold makes FAR == FRR;
    otherwise interpolates between the two candidates bracketing the sign
    change of FAR - FRR and returns the bracket endpoint with the smaller
    miss/false-alarm gap as the threshold.
    """
    cand, far, frr = det_points(pos, neg)
    exact = np.nonzero(far == frr)[0]
    if exact.size:
        i = int(exact[0])
        return float(far[i]), float(cand[i])
    d = far - frr
    flips = np.nonzero((d[:-1] > 0.0) & (d[1:] < 0.0))[0]
    if not flips.size:
        raise AssertionError("no DET crossing found")
    i = int(flips[0]) + 1
    d0, d1 = d[i - 1], d[i]
    u = d0 / (d0 - d1)
    eer = frr[i - 1] + u * (frr[i] - frr[i - 1])
    thr = cand[i - 1] if abs(d0) <= abs(d1) else cand[i]
    return float(eer), float(thr)


@dataclasses.dataclass(frozen=True)
class TdcfConfig:
    """Tandem cost model constants."""
    p_target: float = 0.9405
    p_nontarget: float = 0.0095
    p_spoof: float = 0.05
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0


def min_tdcf(bona_cm, spoof_cm, tar_asv, non_asv, spoof_asv, cfg=None):
    """Minimum normalized tandem cost with ASV fixed at its EER threshold."""
    cfg = cfg or TdcfConfig()
    bona_cm = _as_scores(bona_cm, "bona_cm")
    spoof_cm = _as_scores(spoof_cm, "spoof_cm")
    tar_asv = _as_scores(tar_asv, "tar_asv")
    non_asv = _as_scores(non_asv, "non_asv")
    spoof_asv = _as_scores(spoof_asv, "spoof_asv")

    _, asv_thr = compute_eer(tar_asv, non_asv)
    p_fa_asv = np.count_nonzero(non_asv >= asv_thr) / non_asv.size
    p_miss_asv = np.count_nonzero(tar_asv < asv_thr) / tar_asv.size
    p_miss_spoof = np.count_nonzero(spoof_asv < asv_thr) / spoof_asv.size

    c1 = cfg.p_target * (cfg.c_miss_cm - cfg.c_miss_asv * p_miss_asv) \
        - cfg.p_nontarget * cfg.c_fa_asv * p_fa_asv
    c2 = cfg.c_fa_cm * cfg.p_spoof * (1.0 - p_miss_spoof)
    if c1 <= 0.0 or c2 <= 0.0:
        raise ValueError(f"degenerate tandem costs c1={c1} c2={c2}: the "
                         f"verifier operating point leaves one error mode "
                         f"costless")

    cand = np.unique(np.concatenate([bona_cm, spoof_cm]))
    cand = np.append(cand, cand[-1] + 1.0)
    p_miss_cm = np.searchsorted(np.sort(bona_cm), cand,
                                side="left") / bona_cm.size
    p_fa_cm = (spoof_cm.size - np.searchsorted(np.sort(spoof_cm), cand,
                                               side="left")) / spoof_cm.size
    vals = (c1 * p_miss_cm + c2 * p_fa_cm) / min(c1, c2)
    return float(vals.min())


# ---------------------------------------------------------------------------
# cascade scoring


@dataclasses.dataclass
class TrialScore:
    trial_id: str
    trial_type: str
    pad_score: float
    asv_score: float
    joint_score: float


def joint_score(pad_score, asv_score, tau_pad):
    """Verifier score if the detector accepts, else the rejection sentinel."""
    return asv_score if pad_score >= tau_pad else None


def cascade_decide(pad_score, asv_score, tau_pad, tau_asv):
    return pad_score >= tau_pad and asv_score >= tau_asv


def sentinel_floor(scores):
    """Finite stand-in strictly below every real score in the collection."""
    finite = [s for s in scores if s is not None]
    if not finite:
        return 0.0
    return min(finite) - 1.0


def _fill_sentinels(scores, floor):
    return np.array([floor if s is None else s for s in scores])


def utterance_pad_scores(pad, feats, records, adv=None):
    """Detector score per utterance; spoof features come from adv if given."""
    out = {}
    for r in records:
        x = feats[r.utterance_id]
        if adv and r.label == "spoof" and r.utterance_id in adv:
            x = adv[r.utterance_id]
        out[r.utterance_id] = float(models.pad_forward(pad, x)[0])
    return out


def score_trials(pad, embedder, speakers, feats, records, trials, tau_pad,
                 adv=None, center=None):
    """Stage scores and joint score for every trial.

    records cover at least the trialed utterances; spoof utterances are
    swapped for their adversarial features when adv maps them. Bonafide
    features are never substituted.
    """
    by_utt = {r.utterance_id: r for r in records}
    pad_scores, embeddings = {}, {}
    for t in trials:
        uid = t.utterance_id
        if uid in pad_scores:
            continue
        r = by_utt[uid]
        x = feats[uid]
        if adv and r.label == "spoof" and uid in adv:
            x = adv[uid]
        pad_scores[uid] = float(models.pad_forward(pad, x)[0])
        embeddings[uid] = embedder.embedding(x)

    scored = []
    for t in trials:
        s_pad = pad_scores[t.utterance_id]
        s_asv = models.asv_score(speakers[t.claimed_speaker],
                                 embeddings[t.utterance_id], center=center)
        scored.append(TrialScore(t.trial_id, t.trial_type, s_pad, s_asv,
                                 joint_score(s_pad, s_asv, tau_pad)))
    return scored


def _split(trial_scores, field):
    out = {"target": [], "nontarget": [], "spoof": []}
    for ts in trial_scores:
        out[ts.trial_type].append(getattr(ts, field))
    return out


def joint_eer(trial_scores):
    """EER of target vs (nontarget + spoof) on joint scores."""
    joint = _split(trial_scores, "joint_score")
    floor = sentinel_floor([s for v in joint.values() for s in v])
    pos = _fill_sentinels(joint["target"], floor)
    neg = _fill_sentinels(joint["nontarget"] + joint["spoof"], floor)
    return compute_eer(pos, neg)[0]


def asv_eer(trial_scores):
    """EER of target vs (nontarget + spoof) on raw verifier scores."""
    asv = _split(trial_scores, "asv_score")
    return compute_eer(asv["target"], asv["nontarget"] + asv["spoof"])[0]


def evaluate_system(pad, embedder, speakers, feats, records, trials, tau_pad,
                    attack_sets, tdcf_cfg=None, center=None):
    """Metric stack per attack set.

    attack_sets maps a set name to either None (clean features) or a dict of
    adversarial spoof features. Returns, per name: the utterance-level
    detector EER (bonafide vs spoof), the trial-level verifier and joint
    EERs, and min t-DCF. An attack can push every spoof below the verifier
    operating point; tandem cost is undefined there and min_tdcf is None.
    """
    eval_records = [r for r in records if r.partition == "eval"]
    results = {}
    for name, adv in attack_sets.items():
        pad_by_utt = utterance_pad_scores(pad, feats, eval_records, adv)
        bona_cm = [pad_by_utt[r.utterance_id] for r in eval_records
                   if r.label == "bonafide"]
        spoof_cm = [pad_by_utt[r.utterance_id] for r in eval_records
                    if r.label == "spoof"]
        scored = score_trials(pad, embedder, speakers, feats, eval_records,
                              trials, tau_pad, adv, center=center)
        asv = _split(scored, "asv_score")
        try:
            tdcf = min_tdcf(bona_cm, spoof_cm, asv["target"],
                            asv["nontarget"], asv["spoof"], tdcf_cfg)
        except ValueError as exc:
            if "degenerate" not in str(exc):
                raise
            tdcf = None
        results[name] = {
            "eer_spoof": compute_eer(bona_cm, spoof_cm)[0],
            "eer_asv": asv_eer(scored),
            "eer_joint": joint_eer(scored),
            "min_tdcf": tdcf,
        }
    return results


# ---------------------------------------------------------------------------
# score files and reports


def write_score_file(path, trial_scores):
    lines = ["trial_id\ttrial_type\tpad\tasv\tjoint"]
    for ts in trial_scores:
        joint = SENTINEL_TOKEN if ts.joint_score is None else repr(ts.joint_score)
        lines.append(f"{ts.trial_id}\t{ts.trial_type}\t{ts.pad_score!r}\t"
                     f"{ts.asv_score!r}\t{joint}")
    path.write_text("\n".join(lines) + "\n")


def load_score_file(path):
    lines = path.read_text().splitlines()
    if not lines or lines[0].split("\t") != ["trial_id", "trial_type", "pad",
                                             "asv", "joint"]:
        raise ValueError(f"{path}: missing score header")
    out = []
    for line in lines[1:]:
        tid, ttype, s_pad, s_asv, s_joint = line.split("\t")
        joint = None if s_joint == SENTINEL_TOKEN else float(s_joint)
        out.append(TrialScore(tid, ttype, float(s_pad), float(s_asv), joint))
    return out


def attack_order(names):
    """Canonical report row order: clean, fgsm by eps, pgd by eps, transform."""
    def key(name):
        if name == "no_attack":
            return (0, 0.0, name)
        if name.startswith("fgsm_eps"):
            return (1, float(name[len("fgsm_eps"):]), name)
        if name.startswith("pgd_eps"):
            return (2, float(name[len("pgd_eps"):]), name)
        if name == "transform":
            return (3, 0.0, name)
        return (4, 0.0, name)
    return sorted(names, key=key)


def build_report(results, meta):
    """Deterministic report structure; no timestamps, stable row order."""
    rows = []
    for name in attack_order(results):
        row = {"attack": name}
        for field in ("eer_spoof", "eer_asv", "eer_joint", "min_tdcf"):
            row[field] = results[name][field]
        rows.append(row)
    return {"report_version": REPORT_VERSION, "meta": dict(meta),
            "rows": rows}


def write_report_json(path, report):
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def write_report_tsv(path, report):
    lines = ["attack\teer_spoof_pct\teer_asv_pct\teer_joint_pct\tmin_tdcf"]
    for row in report["rows"]:
        tdcf = row["min_tdcf"]
        lines.append("\t".join([
            row["attack"],
            f"{100.0 * row['eer_spoof']:.4f}",
            f"{100.0 * row['eer_asv']:.4f}",
            f"{100.0 * row['eer_joint']:.4f}",
            "nan" if tdcf is None else f"{tdcf:.6f}",
        ]))
    path.write_text("\n".join(lines) + "\n")
