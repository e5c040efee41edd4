"""Victim and surrogate models for the cascaded biometric system.

Two presentation-attack-detector families consume (frames, bins) log-power
matrices and emit bonafide/spoof class probabilities:

* "lcnn-like": four conv blocks with max-feature-map activations (two kernel
  banks per block, elementwise max across banks), average pooling between
  blocks, global average pooling and a linear head;
* "senet-like": three conv blocks gated by squeeze-excitation, same tail.

The verification side is an x-vector-style embedder (dilated 1-D convolution
stack over time, statistics pooling, linear projection to 64 dims) with a
cosine backend over enrollment means, plus a b-vector pair head that scores
whether two embeddings belong to the same speaker.

All models precondition their input with fixed affine constants (part of the
architecture, not fitted to data) so Adam sees activations near unit scale.
Inputs stay on the raw log-power scale everywhere else.
"""

import dataclasses
import hashlib
import json
import pathlib

import numpy as np

from .autodiff import Adam, Tensor, load_tensors, ops, save_tensors

EMBED_DIM = 64
INPUT_CENTER = -5.0
INPUT_SCALE = 0.2
PAD_FAMILIES = ("lcnn-like", "senet-like")


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _param(rng, shape, fan_in):
    return Tensor(_he(rng, shape, fan_in), requires_grad=True)


def _precondition(x):
    return ops.scale(ops.shift(x, -INPUT_CENTER), INPUT_SCALE)


def _mfm(a, b):
    """Elementwise max of two tensors: 0.5*(a + b + |a - b|)."""
    return ops.scale(ops.add(ops.add(a, b), ops.absolute(ops.sub(a, b))), 0.5)


def _sigmoid_node(z):
    return ops.scale(ops.shift(ops.tanh(ops.scale(z, 0.5)), 1.0), 0.5)


def checksum(state):
    """sha256 over tensor names and raw bytes, order-independent."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.asarray(state[name], dtype=np.float64).tobytes())
    return h.hexdigest()


class _Module:
    """Shared parameter bookkeeping for the concrete models."""

    def __init__(self):
        self._params = {}

    def _add(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def parameters(self):
        return list(self._params.values())

    def state(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()
            t.grad = None

    def set_trainable(self, flag):
        for t in self._params.values():
            t.requires_grad = bool(flag)

    def checksum(self):
        return checksum(self.state())


# ---------------------------------------------------------------------------
# presentation attack detectors


class PadModel(_Module):
    """Bonafide-vs-spoof classifier over log-power feature matrices."""

    def __init__(self, family, n_bins=256, seed=0):
        super().__init__()
        if family not in PAD_FAMILIES:
            raise ValueError(f"unknown PAD family {family!r}")
        self.family = family
        self.n_bins = int(n_bins)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        if family == "lcnn-like":
            # per block: two kernel banks combined by elementwise max
            plan = [(1, 8), (8, 12), (12, 16), (16, 16)]
            for i, (c_in, c_out) in enumerate(plan):
                fan = c_in * 9
                self._add(f"block{i}/bank_a", _param(rng, (c_out, c_in, 3, 3), fan))
                self._add(f"block{i}/bank_b", _param(rng, (c_out, c_in, 3, 3), fan))
            head_in = plan[-1][1]
        else:
            plan = [(1, 12), (12, 24), (24, 32)]
            for i, (c_in, c_out) in enumerate(plan):
                self._add(f"block{i}/conv", _param(rng, (c_out, c_in, 3, 3), c_in * 9))
                squeeze = max(c_out // 4, 2)
                self._add(f"block{i}/se_w1", _param(rng, (squeeze, c_out), c_out))
                self._add(f"block{i}/se_b1", Tensor(np.zeros(squeeze), requires_grad=True))
                self._add(f"block{i}/se_w2", _param(rng, (c_out, squeeze), squeeze))
                self._add(f"block{i}/se_b2", Tensor(np.zeros(c_out), requires_grad=True))
            head_in = plan[-1][1]
        self.n_blocks = len(plan)
        self._add("head/w", _param(rng, (2, head_in), head_in))
        self._add("head/b", Tensor(np.zeros(2), requires_grad=True))

    @property
    def min_frames(self):
        return 2 ** self.n_blocks

    def logits(self, x):
        """x: (frames, bins) tensor -> (2,) logits [bonafide, spoof]."""
        if x.shape[0] < self.min_frames:
            raise ValueError(f"{self.family} needs >= {self.min_frames} "
                             f"frames, got {x.shape[0]}")
        h = ops.reshape(_precondition(x), (1,) + tuple(x.shape))
        p = self._params
        if self.family == "lcnn-like":
            for i in range(self.n_blocks):
                a = ops.conv2d(h, p[f"block{i}/bank_a"], 1)
                b = ops.conv2d(h, p[f"block{i}/bank_b"], 1)
                h = ops.avg_pool2d(_mfm(a, b), 2)
        else:
            for i in range(self.n_blocks):
                h = ops.leaky_relu(ops.conv2d(h, p[f"block{i}/conv"], 1))
                pooled = ops.global_avg_pool(h)
                gate = _sigmoid_node(ops.linear(
                    ops.leaky_relu(ops.linear(pooled, p[f"block{i}/se_w1"],
                                              p[f"block{i}/se_b1"])),
                    p[f"block{i}/se_w2"], p[f"block{i}/se_b2"]))
                h = ops.avg_pool2d(ops.channel_scale(h, gate), 2)
        return ops.linear(ops.global_avg_pool(h), p["head/w"], p["head/b"])

    def probs(self, x):
        return ops.softmax(self.logits(x))


def pad_forward(model, feats):
    """Class probabilities [P(bonafide), P(spoof)] for one feature matrix."""
    data = feats.data if hasattr(feats, "data") else np.asarray(feats)
    return model.probs(Tensor(data)).data


# ---------------------------------------------------------------------------
# speaker embedding / verification


class AsvEmbedder(_Module):
    """Dilated temporal conv stack with statistics pooling, 64-dim output.

    Only the lowest speech_bins frequency bins reach the convolutions;
    identity lives in the f0 and formant region, and keeping the top band
    out makes the embedding invariant to what happens there.
    """

    DILATIONS = (1, 2, 3)

    def __init__(self, n_bins=256, hidden=48, seed=0, speech_bins=None):
        super().__init__()
        self.n_bins = int(n_bins)
        self.hidden = int(hidden)
        self.seed = int(seed)
        if speech_bins is None:
            speech_bins = 3 * self.n_bins // 4
        self.speech_bins = int(speech_bins)
        if not 0 < self.speech_bins <= self.n_bins:
            raise ValueError(f"speech_bins must be in (0, {self.n_bins}], "
                             f"got {speech_bins}")
        self._band = (np.arange(self.n_bins) < self.speech_bins).astype(float)
        rng = np.random.default_rng(seed + 1)
        dims = [self.n_bins] + [self.hidden] * len(self.DILATIONS)
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            self._add(f"tdnn{i}/k", _param(rng, (d_out, d_in, 3), d_in * 3))
        self._add("proj/w", _param(rng, (EMBED_DIM, 2 * self.hidden),
                                   2 * self.hidden))
        self._add("proj/b", Tensor(np.zeros(EMBED_DIM), requires_grad=True))

    @property
    def min_frames(self):
        return 1 + sum(2 * d for d in self.DILATIONS) + 1

    def embed(self, x):
        """x: (frames, bins) tensor -> (64,) embedding node."""
        if x.shape[0] < self.min_frames:
            raise ValueError(f"embedder needs >= {self.min_frames} frames, "
                             f"got {x.shape[0]}")
        band = Tensor(np.tile(self._band, (x.shape[0], 1)))
        h = ops.mul(_precondition(x), band)
        for i, dil in enumerate(self.DILATIONS):
            h = ops.leaky_relu(ops.conv1d(h, self._params[f"tdnn{i}/k"], dil))
        pooled = ops.stats_pool(h)
        return ops.linear(pooled, self._params["proj/w"], self._params["proj/b"])

    def embedding(self, feats):
        data = feats.data if hasattr(feats, "data") else np.asarray(feats)
        return self.embed(Tensor(data)).data


@dataclasses.dataclass
class SpeakerModel:
    speaker_id: str
    mean_embedding: np.ndarray
    n_enrolled: int


def enroll_speaker(embedder, speaker_id, feats_list):
    if not feats_list:
        raise ValueError(f"no enrollment utterances for {speaker_id}")
    embs = [embedder.embedding(f) for f in feats_list]
    return SpeakerModel(speaker_id, np.mean(embs, axis=0), len(embs))


def asv_score(speaker, embedding, center=None):
    """Cosine similarity between the enrollment mean and a test embedding.

    `center` is an optional population mean subtracted from both sides
    before the cosine. Centering removes the component shared by every
    embedding, which otherwise dominates the score and compresses the
    target/impostor separation.
    """
    a = speaker.mean_embedding
    b = np.asarray(embedding)
    if center is not None:
        c = np.asarray(center)
        a = a - c
        b = b - c
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# b-vector pair head


class BVectorModel(_Module):
    """Same-speaker probability from a pair of embeddings.

    Pair features are symmetric in the inputs (sum, product, absolute
    difference), so the prediction is order-invariant by construction.
    """

    def __init__(self, embed_dim=EMBED_DIM, hidden=32, seed=0):
        super().__init__()
        self.embed_dim = int(embed_dim)
        self.hidden = int(hidden)
        rng = np.random.default_rng(seed + 2)
        d = 3 * self.embed_dim
        self._add("w1", _param(rng, (self.hidden, d), d))
        self._add("b1", Tensor(np.zeros(self.hidden), requires_grad=True))
        self._add("w2", _param(rng, (1, self.hidden), self.hidden))
        self._add("b2", Tensor(np.zeros(1), requires_grad=True))

    def logit(self, x1, x2):
        pair = ops.concat([ops.add(x1, x2), ops.mul(x1, x2),
                           ops.absolute(ops.sub(x1, x2))])
        h = ops.leaky_relu(ops.linear(pair, self._params["w1"],
                                      self._params["b1"]))
        return ops.linear(h, self._params["w2"], self._params["b2"])

    def prob(self, x1, x2):
        return _sigmoid_node(self.logit(x1, x2))

    def predict(self, emb1, emb2):
        return float(self.prob(Tensor(np.asarray(emb1)),
                               Tensor(np.asarray(emb2))).data[0])


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, path):
    """Write parameters plus a JSON sidecar describing how to rebuild them."""
    path = pathlib.Path(path)
    if isinstance(model, PadModel):
        meta = {"kind": "pad", "family": model.family,
                "n_bins": model.n_bins, "seed": model.seed}
    elif isinstance(model, AsvEmbedder):
        meta = {"kind": "embedder", "n_bins": model.n_bins,
                "hidden": model.hidden, "seed": model.seed,
                "speech_bins": model.speech_bins}
    elif isinstance(model, BVectorModel):
        meta = {"kind": "bvector", "embed_dim": model.embed_dim,
                "hidden": model.hidden}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    meta["checksum"] = model.checksum()
    save_tensors(path, model.state())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta["checksum"]


def load_model(path):
    path = pathlib.Path(path)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text())
    kind = meta["kind"]
    if kind == "pad":
        model = PadModel(meta["family"], n_bins=meta["n_bins"],
                         seed=meta["seed"])
    elif kind == "embedder":
        model = AsvEmbedder(n_bins=meta["n_bins"], hidden=meta["hidden"],
                            seed=meta["seed"],
                            speech_bins=meta["speech_bins"])
    elif kind == "bvector":
        model = BVectorModel(embed_dim=meta["embed_dim"],
                             hidden=meta["hidden"])
    else:
        raise ValueError(f"unknown model kind {kind!r} in {sidecar}")
    model.load_state(load_tensors(path))
    if model.checksum() != meta["checksum"]:
        raise ValueError(f"checksum mismatch loading {path}")
    return model


def save_speakers(speakers, path, center=None):
    arrays = {}
    for s in speakers.values():
        arrays[f"{s.speaker_id}/mean"] = s.mean_embedding
        arrays[f"{s.speaker_id}/n"] = np.array(float(s.n_enrolled))
    if center is not None:
        arrays["_/center"] = np.asarray(center, dtype=np.float64)
    save_tensors(path, arrays)


def load_speakers(path):
    """Returns (speakers dict, center or None)."""
    arrays = load_tensors(path)
    speakers = {}
    for name, arr in arrays.items():
        sid, field = name.rsplit("/", 1)
        if sid == "_":
            continue
        if field == "mean":
            speakers[sid] = SpeakerModel(sid, arr,
                                         int(arrays[f"{sid}/n"].item()))
    return speakers, arrays.get("_/center")


# ---------------------------------------------------------------------------
# training loops


@dataclasses.dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 20
    batch_size: int = 8
    patience: int = 3
    seed: int = 0


def _mean_loss(nodes):
    total = nodes[0]
    for n in nodes[1:]:
        total = ops.add(total, n)
    return ops.scale(total, 1.0 / len(nodes))


def run_epochs(module, examples, batch_loss, dev_loss, cfg):
    """Generic minibatch loop with early stopping on the dev loss.

    examples: list of opaque items handed back to batch_loss one at a time.
    Restores the best-dev parameter state before returning the history.
    """
    opt = Adam(module.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 17)
    best_loss, best_state, bad = np.inf, module.state(), 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            loss = _mean_loss([batch_loss(examples[i]) for i in chunk])
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        dev = dev_loss()
        history.append({"epoch": epoch,
                        "train_loss": float(np.mean(epoch_losses)),
                        "dev_loss": dev})
        if dev < best_loss - 1e-9:
            best_loss, best_state, bad = dev, module.state(), 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    module.load_state(best_state)
    return history


def train_pad(feats, train_records, dev_records, family="lcnn-like",
              n_bins=256, cfg=None):
    """Fit a PAD on bonafide/spoof records; feats maps utterance id -> matrix."""
    cfg = cfg or TrainConfig()
    model = PadModel(family, n_bins=n_bins, seed=cfg.seed)
    examples = [(r.utterance_id, 0 if r.label == "bonafide" else 1)
                for r in train_records]
    dev_examples = [(r.utterance_id, 0 if r.label == "bonafide" else 1)
                    for r in dev_records]
    if len({lab for _, lab in examples}) < 2:
        raise ValueError("train_pad: need both bonafide and spoof examples")

    def batch_loss(example):
        uid, label = example
        return ops.cross_entropy(model.logits(Tensor(feats[uid])), label)

    def dev_loss():
        vals = [ops.cross_entropy(model.logits(Tensor(feats[uid])), lab).item()
                for uid, lab in dev_examples]
        return float(np.mean(vals))

    history = run_epochs(model, examples, batch_loss, dev_loss, cfg)
    return model, history


def train_embedder(feats, train_records, dev_records, n_bins=256, hidden=48,
                   speech_bins=None, cfg=None):
    """Fit the embedder with a speaker-id softmax head on bonafide records.

    The head is discarded; only the embedder comes back.
    """
    cfg = cfg or TrainConfig()
    train_records = [r for r in train_records if r.label == "bonafide"]
    dev_records = [r for r in dev_records if r.label == "bonafide"]
    speakers = sorted({r.speaker_id for r in train_records})
    if len(speakers) < 2:
        raise ValueError("train_embedder: need at least 2 speakers")
    spk_index = {s: i for i, s in enumerate(speakers)}

    embedder = AsvEmbedder(n_bins=n_bins, hidden=hidden, seed=cfg.seed,
                           speech_bins=speech_bins)
    rng = np.random.default_rng(cfg.seed + 3)
    head_w = Tensor(_he(rng, (len(speakers), EMBED_DIM), EMBED_DIM),
                    requires_grad=True)
    head_b = Tensor(np.zeros(len(speakers)), requires_grad=True)

    class _WithHead(_Module):
        def __init__(self):
            super().__init__()
            self._params = dict(embedder._params)
            self._params["head/w"] = head_w
            self._params["head/b"] = head_b

    wrapped = _WithHead()

    def class_loss(record):
        emb = embedder.embed(Tensor(feats[record.utterance_id]))
        return ops.cross_entropy(ops.linear(emb, head_w, head_b),
                                 spk_index[record.speaker_id])

    def dev_loss():
        vals = [class_loss(r).item() for r in dev_records
                if r.speaker_id in spk_index]
        return float(np.mean(vals))

    history = run_epochs(wrapped, train_records, class_loss, dev_loss, cfg)
    return embedder, history


def train_bvector(pairs, dev_pairs, embed_dim=EMBED_DIM, cfg=None):
    """Fit the pair head on (embedding, embedding, label) triples."""
    cfg = cfg or TrainConfig()
    labels = {lab for _, _, lab in pairs}
    if labels != {0, 1}:
        raise ValueError(f"train_bvector: need both pair labels, got {labels}")
    model = BVectorModel(embed_dim=embed_dim, seed=cfg.seed)

    def pair_loss(pair):
        e1, e2, label = pair
        return ops.bce_with_logit(model.logit(Tensor(e1), Tensor(e2)), label)

    def dev_loss():
        return float(np.mean([pair_loss(p).item() for p in dev_pairs]))

    history = run_epochs(model, list(pairs), pair_loss, dev_loss, cfg)
    return model, history


def make_speaker_pairs(embeddings, records, n_pairs, seed):
    """Balanced same/different-speaker embedding pairs with truth labels."""
    by_spk = {}
    for r in records:
        if r.label == "bonafide":
            by_spk.setdefault(r.speaker_id, []).append(r.utterance_id)
    speakers = sorted(s for s, utts in by_spk.items() if len(utts) >= 2)
    if len(speakers) < 2:
        raise ValueError("make_speaker_pairs: need 2+ speakers with 2+ utts")
    rng = np.random.default_rng(seed + 5)
    pairs = []
    for i in range(n_pairs):
        if i % 2 == 0:
            spk = speakers[rng.integers(len(speakers))]
            a, b = rng.choice(len(by_spk[spk]), size=2, replace=False)
            pairs.append((embeddings[by_spk[spk][a]],
                          embeddings[by_spk[spk][b]], 1))
        else:
            ia, ib = rng.choice(len(speakers), size=2, replace=False)
            ua = by_spk[speakers[ia]][rng.integers(len(by_spk[speakers[ia]]))]
            ub = by_spk[speakers[ib]][rng.integers(len(by_spk[speakers[ib]]))]
            pairs.append((embeddings[ua], embeddings[ub], 0))
    return pairs
