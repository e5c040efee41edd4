"""Adversarial attacks against the PAD + ASV cascade.

Three crafting methods over log-power feature matrices:

* fgsm: single signed-gradient step of size epsilon;
* pgd: iterated signed-gradient steps of size epsilon/n_steps, each iterate
  clipped back into the epsilon-ball around the original features;
* TransformNet: a residual convolutional network trained to rewrite spoof
  features so the detector scores them like bonafide speech while the
  speaker embedding stays close to the original.

White-box training reads gradients straight off the victim models, which stay
frozen (enforced by parameter checksums). Black-box training never touches
victim internals: a TeacherOracle exposes only per-stage accept/reject bits,
students are distilled from those bits, and every attack is crafted against
the students.

Attacks are defined for spoof utterances only; bonafide features always pass
through untouched.
"""

import contextlib
import dataclasses
import json
import pathlib

import numpy as np

from . import models
from .autodiff import Tensor, load_tensors, ops, save_tensors

EPSILON_GRID = (0.1, 1.0, 2.0, 5.0)
PGD_STEPS = 10


@contextlib.contextmanager
def _inference(*modules):
    """Temporarily clear requires_grad so backward skips victim kernels."""
    saved = [(t, t.requires_grad) for m in modules for t in m.parameters()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _input_grad(pad, x_data, label):
    x = Tensor(x_data, requires_grad=True)
    ops.cross_entropy(pad.logits(x), label).backward()
    return x.grad


def fgsm(pad, feats, eps, label=1):
    """One signed ascent step on the classifier loss at the true label."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.asarray(feats, dtype=np.float64)
    with _inference(pad):
        g = _input_grad(pad, x0, label)
    return x0 + eps * np.sign(g)


def pgd(pad, feats, eps, n_steps=PGD_STEPS, label=1):
    """Iterated signed ascent with per-step size eps/n_steps and clipping."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x0 = np.asarray(feats, dtype=np.float64)
    lo, hi = x0 - eps, x0 + eps
    alpha = eps / n_steps
    x = x0
    with _inference(pad):
        for _ in range(n_steps):
            g = _input_grad(pad, x, label)
            x = np.clip(x + alpha * np.sign(g), lo, hi)
    return x


def rerank(scores, alpha):
    """Boost the first entry to alpha times the maximum, then renormalize.

    Used to build the target distribution the transform network chases: the
    bonafide class (entry 0) ends up dominating any other entry by the
    factor alpha, so the argmax is always entry 0 for alpha > 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("scores must be a non-empty 1-D vector")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("scores must be finite and non-negative")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    out = s.copy()
    out[0] = alpha * s.max()
    total = out.sum()
    if total <= 0:
        raise ValueError("scores sum to zero")
    return out / total


# ---------------------------------------------------------------------------
# transform network


class TransformNet(models._Module):
    """Residual convolutional rewriter for feature matrices.

    Five 3x3 same-padded conv layers (1 -> 16 -> 32 -> 48 -> 48 -> 1) with
    leaky-relu between them; the final layer starts at zero so the net is the
    identity before training and learns a perturbation g(x) added back onto
    the input.
    """

    CHANNELS = (1, 16, 32, 48, 48, 1)

    def __init__(self, seed=0):
        super().__init__()
        self.seed = int(seed)
        rng = np.random.default_rng(seed + 29)
        specs = list(zip(self.CHANNELS[:-1], self.CHANNELS[1:]))
        for i, (c_in, c_out) in enumerate(specs):
            if i == len(specs) - 1:
                k = Tensor(np.zeros((c_out, c_in, 3, 3)), requires_grad=True)
            else:
                k = models._param(rng, (c_out, c_in, 3, 3), c_in * 9)
            self._add(f"layer{i}/k", k)
        self.n_layers = len(specs)

    def delta_node(self, x):
        h = ops.reshape(x, (1,) + tuple(x.shape))
        for i in range(self.n_layers):
            h = ops.conv2d(h, self._params[f"layer{i}/k"], 1)
            if i < self.n_layers - 1:
                h = ops.leaky_relu(h)
        return ops.reshape(h, tuple(x.shape))

    def apply_node(self, x):
        return ops.add(x, self.delta_node(x))

    def apply(self, feats):
        data = np.asarray(feats, dtype=np.float64)
        with _inference(self):
            return self.apply_node(Tensor(data)).data


def _verify_frozen(tag, module, want):
    got = module.checksum()
    if got != want:
        raise RuntimeError(f"victim {tag} parameters changed during attack "
                           f"training ({got[:12]} != {want[:12]})")


def train_transform_whitebox(pad, embedder, feats, train_records, dev_records,
                             alpha=10.0, embed_weight=1e-3, cfg=None):
    """Fit the transform against gradient-visible, frozen victim models.

    Per-utterance loss: squared distance from the detector's softmax on
    the transformed features to the reranked original score vector, plus
    embed_weight times the squared embedding displacement. Squared terms
    keep the identity penalty's gradient proportional to how far the
    embedding has already drifted, so small drifts stay cheap and large
    ones are pulled back hard.
    """
    cfg = cfg or models.TrainConfig()
    for r in train_records + dev_records:
        if r.label != "spoof":
            raise ValueError(f"transform training takes spoof records only, "
                             f"got {r.utterance_id}")
    pad_sum, emb_sum = pad.checksum(), embedder.checksum()
    targets, emb_orig = {}, {}
    for r in train_records + dev_records:
        uid = r.utterance_id
        targets[uid] = rerank(models.pad_forward(pad, feats[uid]), alpha)
        emb_orig[uid] = embedder.embedding(feats[uid])

    net = TransformNet(seed=cfg.seed)

    def utt_loss(record):
        uid = record.utterance_id
        adv = net.apply_node(Tensor(feats[uid]))
        score_dist = ops.l2_distance(ops.softmax(pad.logits(adv)),
                                     Tensor(targets[uid]))
        embed_dist = ops.l2_distance(embedder.embed(adv),
                                     Tensor(emb_orig[uid]))
        return ops.add(ops.mul(score_dist, score_dist),
                       ops.scale(ops.mul(embed_dist, embed_dist),
                                 embed_weight))

    def dev_loss():
        _verify_frozen("pad", pad, pad_sum)
        _verify_frozen("embedder", embedder, emb_sum)
        return float(np.mean([utt_loss(r).item() for r in dev_records]))

    with _inference(pad, embedder):
        history = models.run_epochs(net, list(train_records), utt_loss,
                                    dev_loss, cfg)
    _verify_frozen("pad", pad, pad_sum)
    _verify_frozen("embedder", embedder, emb_sum)
    return net, history


# ---------------------------------------------------------------------------
# black-box side: decision oracle, distilled students


class TeacherOracle:
    """Victim cascade behind a decision-only API.

    query() returns the two stage bits (detector accept, verifier accept)
    and counts every call; nothing else about the victims leaks out.
    """

    def __init__(self, pad, embedder, speakers, tau_pad, tau_asv,
                 center=None):
        self._pad = pad
        self._embedder = embedder
        self._speakers = dict(speakers)
        self._center = center
        self.tau_pad = float(tau_pad)
        self.tau_asv = float(tau_asv)
        self.n_queries = 0

    def query(self, feats, claimed_speaker):
        if claimed_speaker not in self._speakers:
            raise KeyError(f"unknown speaker {claimed_speaker!r}")
        self.n_queries += 1
        pad_ok = models.pad_forward(self._pad, feats)[0] >= self.tau_pad
        emb = self._embedder.embedding(feats)
        asv_ok = models.asv_score(self._speakers[claimed_speaker],
                                  emb, center=self._center) >= self.tau_asv
        return bool(pad_ok), bool(asv_ok)


def distill_student_pad(oracle, feats, train_records, dev_records,
                        family="senet-like", cfg=None):
    """Train a detector student on the oracle's accept/reject bits."""
    def relabel(records):
        out = []
        for r in records:
            pad_ok, _ = oracle.query(feats[r.utterance_id], r.speaker_id)
            out.append(dataclasses.replace(
                r, label="bonafide" if pad_ok else "spoof"))
        return out

    return models.train_pad(feats, relabel(train_records),
                            relabel(dev_records), family=family, cfg=cfg)


def pad_agreement(student, oracle, feats, records):
    """Fraction of records where the student's accept bit matches the oracle."""
    hits = 0
    for r in records:
        teacher_bit, _ = oracle.query(feats[r.utterance_id], r.speaker_id)
        student_bit = models.pad_forward(student,
                                         feats[r.utterance_id])[0] >= 0.5
        hits += int(teacher_bit == student_bit)
    return hits / len(records)


def make_probes(records, rng_seed):
    """(utterance id, claimed speaker) probes: own claim plus one impostor."""
    speakers = sorted({r.speaker_id for r in records})
    if len(speakers) < 2:
        raise ValueError("probes need at least 2 speakers")
    rng = np.random.default_rng(rng_seed)
    probes = []
    for r in records:
        probes.append((r.utterance_id, r.speaker_id))
        others = [s for s in speakers if s != r.speaker_id]
        probes.append((r.utterance_id, others[rng.integers(len(others))]))
    return probes


def distill_student_asv(oracle, embedder, feats, anchor_records, probes,
                        dev_probes, pairs_per_probe=2, cfg=None):
    """Train a pair-head student on the oracle's verifier bits.

    probes are (utterance id, claimed speaker) tuples; each is paired with
    bonafide anchor utterances of the claimed speaker and labeled by the
    oracle's ASV-stage decision for the probe under that claim. The student
    scores embedding pairs, so at attack time its gradient reaches back
    through the embedder into the features.
    """
    cfg = cfg or models.TrainConfig()
    anchors = {}
    for r in anchor_records:
        if r.label != "bonafide":
            raise ValueError("anchor records must be bonafide")
        anchors.setdefault(r.speaker_id, []).append(r.utterance_id)
    embs = {}

    def emb(uid):
        if uid not in embs:
            embs[uid] = embedder.embedding(feats[uid])
        return embs[uid]

    def build_pairs(probe_list):
        rng = np.random.default_rng(cfg.seed + 31)
        pairs = []
        for uid, claimed in probe_list:
            pool = anchors.get(claimed)
            if not pool:
                raise ValueError(f"no anchor utterances for speaker "
                                 f"{claimed}")
            _, asv_ok = oracle.query(feats[uid], claimed)
            take = min(pairs_per_probe, len(pool))
            for j in rng.choice(len(pool), size=take, replace=False):
                pairs.append((emb(pool[j]), emb(uid), int(asv_ok)))
        return pairs

    return models.train_bvector(build_pairs(probes), build_pairs(dev_probes),
                                cfg=cfg)


def asv_agreement(student, embedder, anchors_mean, oracle, feats, probes):
    """Match rate between the pair head's bit and the oracle's verifier bit."""
    hits = 0
    for uid, claimed in probes:
        _, teacher_bit = oracle.query(feats[uid], claimed)
        prob = student.predict(anchors_mean[claimed],
                               embedder.embedding(feats[uid]))
        hits += int(teacher_bit == (prob >= 0.5))
    return hits / len(probes)


def train_transform_blackbox(student_pad, student_bvec, embedder,
                             anchors_mean, feats, train_records, dev_records,
                             same_weight=1.0, cfg=None):
    """Fit the transform against students only.

    Per-utterance loss: squared distance from the student detector's softmax
    to the one-hot bonafide vector, plus same_weight times (1 - student
    same-speaker probability) for the claimed speaker.
    """
    cfg = cfg or models.TrainConfig()
    for r in train_records + dev_records:
        if r.label != "spoof":
            raise ValueError(f"transform training takes spoof records only, "
                             f"got {r.utterance_id}")
    sums = {"student_pad": student_pad.checksum(),
            "student_bvec": student_bvec.checksum(),
            "embedder": embedder.checksum()}
    onehot = np.array([1.0, 0.0])
    net = TransformNet(seed=cfg.seed)

    def utt_loss(record):
        uid = record.utterance_id
        adv = net.apply_node(Tensor(feats[uid]))
        score_dist = ops.l2_distance(ops.softmax(student_pad.logits(adv)),
                                     Tensor(onehot))
        p_same = student_bvec.prob(Tensor(anchors_mean[record.speaker_id]),
                                   embedder.embed(adv))
        miss_term = ops.shift(ops.scale(p_same, -1.0), 1.0)
        return ops.add(ops.mul(score_dist, score_dist),
                       ops.scale(miss_term, same_weight))

    def dev_loss():
        _verify_frozen("student_pad", student_pad, sums["student_pad"])
        _verify_frozen("student_bvec", student_bvec, sums["student_bvec"])
        _verify_frozen("embedder", embedder, sums["embedder"])
        return float(np.mean([utt_loss(r).item() for r in dev_records]))

    with _inference(student_pad, student_bvec, embedder):
        history = models.run_epochs(net, list(train_records), utt_loss,
                                    dev_loss, cfg)
    _verify_frozen("student_pad", student_pad, sums["student_pad"])
    _verify_frozen("student_bvec", student_bvec, sums["student_bvec"])
    _verify_frozen("embedder", embedder, sums["embedder"])
    return net, history


# ---------------------------------------------------------------------------
# attack sets


def craft_attack_set(method, pad, feats, spoof_records, eps=None,
                     n_steps=PGD_STEPS, net=None):
    """Adversarial features for every spoof record, keyed by utterance id."""
    for r in spoof_records:
        if r.label != "spoof":
            raise ValueError(f"{r.utterance_id} is not a spoof utterance")
    adv = {}
    if method == "fgsm":
        for r in spoof_records:
            adv[r.utterance_id] = fgsm(pad, feats[r.utterance_id], eps)
    elif method == "pgd":
        for r in spoof_records:
            adv[r.utterance_id] = pgd(pad, feats[r.utterance_id], eps,
                                      n_steps)
    elif method == "transform":
        if net is None:
            raise ValueError("transform method needs a trained net")
        for r in spoof_records:
            adv[r.utterance_id] = net.apply(feats[r.utterance_id])
    else:
        raise ValueError(f"unknown attack method {method!r}")
    return adv


def embedding_displacements(embedder, feats, adv):
    """L2 embedding displacement per attacked utterance, same key order."""
    out = {}
    for uid, x_adv in adv.items():
        d = embedder.embedding(x_adv) - embedder.embedding(feats[uid])
        out[uid] = float(np.linalg.norm(d))
    return out


def save_attack_set(path, adv, meta):
    path = pathlib.Path(path)
    save_tensors(path, adv)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_attack_set(path):
    path = pathlib.Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return load_tensors(path), meta
