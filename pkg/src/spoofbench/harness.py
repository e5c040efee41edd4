"""Experiment harness: configuration, staged pipeline, CLI.

A run is described by an INI file and executes as a chain of stages:

    gen-corpus -> extract-features -> train-pad -> train-asv
        -> distill-students -> attack -> evaluate -> report

Each stage writes its artifacts under the output root plus a marker in
state/ recording the effective config hash and artifact digests. A stage
whose marker matches the current config is skipped with a notice; --force
reruns it. Running a stage whose upstream marker is missing exits with
code 2 and names the stage to run first; a marker written under a different
config is refused so artifacts from mixed configurations never blend.

The attack stage crafts the full grid: fgsm and pgd at every epsilon plus
the trained transform network. In whitebox mode gradients come from the
victim detector; in blackbox mode every attack is crafted against students
distilled from the decision-only oracle, and the victims are only ever used
to evaluate.
"""

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import pathlib
import sys
import time

import numpy as np

from . import attacks, corpus, evalmetrics, features, models
from .autodiff import load_tensors, save_tensors

STAGES = ("gen-corpus", "extract-features", "train-pad", "train-asv",
          "distill-students", "attack", "evaluate", "report")

_DEFAULTS = {
    "corpus": {
        "n_speakers": "16", "scenario": "la", "seed": "0",
        "duration_min": "0.9", "duration_max": "1.1",
        "bonafide_train": "10", "bonafide_dev": "4", "bonafide_eval": "5",
        "spoof_train": "10", "spoof_dev": "4", "spoof_eval": "5",
        "n_enroll": "2",
    },
    "features": {
        "sample_rate": "16000", "window_ms": "25.0", "hop_ms": "10.0",
        "fft_size": "512", "n_bins": "256", "max_frames": "600",
    },
    "models": {
        "pad_family": "lcnn-like", "student_family": "senet-like",
        "embed_hidden": "48", "embed_speech_bins": "192",
        "epochs": "20", "batch_size": "8",
        "patience": "3", "lr": "3e-4",
    },
    "attack": {
        "mode": "whitebox", "epsilons": "0.1,1.0,2.0,5.0",
        "pgd_steps": "10", "rerank_alpha": "10.0", "embed_weight": "0.001",
        "same_weight": "1.0", "transform_epochs": "20",
        "transform_lr": "3e-4",
    },
    "output": {
        "root": "runs/default",
    },
}


class StageError(Exception):
    """Pipeline failure carrying the process exit code."""

    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_ini(cls, path, seed_override=None):
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise StageError(f"config file not found: {path}")
        raw = {s: dict(d) for s, d in _DEFAULTS.items()}
        for section in parser.sections():
            if section not in raw:
                raise StageError(f"unknown config section [{section}]")
            for key, value in parser[section].items():
                if key not in raw[section]:
                    raise StageError(
                        f"unknown config key {key!r} in [{section}]")
                raw[section][key] = value.strip()
        if seed_override is not None:
            raw["corpus"]["seed"] = str(int(seed_override))
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.scenario not in ("la", "pa"):
            raise StageError(f"scenario must be la or pa, got "
                             f"{self.scenario!r}")
        if self.mode not in ("whitebox", "blackbox"):
            raise StageError(f"attack mode must be whitebox or blackbox, "
                             f"got {self.mode!r}")
        if self.pad_family not in models.PAD_FAMILIES:
            raise StageError(f"unknown pad_family {self.pad_family!r}")
        if self.student_family not in models.PAD_FAMILIES:
            raise StageError(f"unknown student_family "
                             f"{self.student_family!r}")
        if not self.epsilons or any(e <= 0 for e in self.epsilons):
            raise StageError("epsilons must be positive")
        self.synthetic_spec().validate()
        self.window_config().validate()

    # typed accessors over the raw string table
    def _get(self, section, key, conv=str):
        return conv(self.raw[section][key])

    @property
    def scenario(self):
        return self._get("corpus", "scenario")

    @property
    def seed(self):
        return self._get("corpus", "seed", int)

    @property
    def n_enroll(self):
        return self._get("corpus", "n_enroll", int)

    @property
    def pad_family(self):
        return self._get("models", "pad_family")

    @property
    def student_family(self):
        return self._get("models", "student_family")

    @property
    def mode(self):
        return self._get("attack", "mode")

    @property
    def epsilons(self):
        text = self._get("attack", "epsilons")
        return tuple(float(tok) for tok in text.split(",") if tok.strip())

    @property
    def output_root(self):
        return self._get("output", "root")

    def synthetic_spec(self):
        c = self.raw["corpus"]
        return corpus.SyntheticSpec(
            n_speakers=int(c["n_speakers"]), scenario=c["scenario"],
            seed=int(c["seed"]),
            duration_range=(float(c["duration_min"]),
                            float(c["duration_max"])),
            bonafide_counts=(int(c["bonafide_train"]), int(c["bonafide_dev"]),
                             int(c["bonafide_eval"])),
            spoof_counts=(int(c["spoof_train"]), int(c["spoof_dev"]),
                          int(c["spoof_eval"])))

    def window_config(self):
        f = self.raw["features"]
        return features.WindowConfig(
            sample_rate=int(f["sample_rate"]), window_ms=float(f["window_ms"]),
            hop_ms=float(f["hop_ms"]), fft_size=int(f["fft_size"]),
            n_bins=int(f["n_bins"]), max_frames=int(f["max_frames"]))

    def train_config(self, seed_shift=0, epochs=None, lr=None):
        m = self.raw["models"]
        return models.TrainConfig(
            lr=float(m["lr"]) if lr is None else lr,
            epochs=int(m["epochs"]) if epochs is None else epochs,
            batch_size=int(m["batch_size"]), patience=int(m["patience"]),
            seed=self.seed + seed_shift)

    def canonical_text(self):
        # [output] is where the experiment lands, not what it is: the hash
        # must stay stable when the same config is materialized elsewhere
        lines = []
        for section in sorted(self.raw):
            if section == "output":
                continue
            lines.append(f"[{section}]")
            for key in sorted(self.raw[section]):
                lines.append(f"{key} = {self.raw[section][key]}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


class Workspace:
    """Filesystem layout of one experiment run."""

    def __init__(self, root):
        self.root = pathlib.Path(root)
        self.state_dir = self.root / "state"
        self.corpus_dir = self.root / "corpus"
        self.models_dir = self.root / "models"
        self.students_dir = self.root / "students"
        self.attacks_dir = self.root / "attacks"
        self.scores_dir = self.root / "scores"
        self.report_dir = self.root / "report"
        self.manifest = self.corpus_dir / "manifest.tsv"
        self.trials = self.corpus_dir / "trials.tsv"
        self.feats = self.root / "features" / "logpower.ckpt"
        self.runs_log = self.root / "runs.jsonl"

    def marker(self, stage):
        return self.state_dir / f"{stage}.json"


def resolve_root(cfg, cli_out=None):
    """Output root precedence: --out, then SPOOFBENCH_OUT, then config."""
    if cli_out:
        return pathlib.Path(cli_out)
    env = os.environ.get("SPOOFBENCH_OUT")
    if env:
        return pathlib.Path(env)
    return pathlib.Path(cfg.output_root)


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_records(ws):
    return corpus.load_manifest(ws.manifest, check_audio=False)


def _load_feats(ws):
    return load_tensors(ws.feats)


def _partitions(records):
    return {p: [r for r in records if r.partition == p]
            for p in corpus.PARTITIONS}


def _dev_split(parts, n_enroll):
    """Dev-side enrollment/test split used to pin both thresholds."""
    dev_bona = {}
    for r in parts["dev"]:
        if r.label == "bonafide":
            dev_bona.setdefault(r.speaker_id, []).append(r.utterance_id)
    enroll, test = {}, {}
    for s, utts in sorted(dev_bona.items()):
        k = min(n_enroll, len(utts) - 1)
        if k < 1:
            raise StageError(f"speaker {s} has too few dev bonafide "
                             f"utterances to enroll and test")
        enroll[s] = utts[:k]
        test[s] = utts[k:]
    return enroll, test


# ---------------------------------------------------------------------------
# stage bodies; each returns a summary dict and a {name: path} artifact map


def _stage_gen_corpus(cfg, ws):
    spec = cfg.synthetic_spec()
    records = corpus.generate_corpus(spec, ws.corpus_dir)
    corpus.write_manifest(records, ws.manifest)
    enrollments, trials = corpus.build_trials(records, cfg.n_enroll)
    corpus.write_trials(enrollments, trials, ws.trials)
    counts = {t: 0 for t in ("target", "nontarget", "spoof")}
    for t in trials:
        counts[t.trial_type] += 1
    return ({"n_utterances": len(records), "n_trials": len(trials),
             "trial_counts": counts},
            {"manifest": ws.manifest, "trials": ws.trials})


def _stage_extract_features(cfg, ws):
    records = corpus.load_manifest(ws.manifest, check_audio=True)
    wcfg = cfg.window_config()
    feats = {}
    for r in records:
        wave = corpus.read_wav(ws.corpus_dir / r.path)
        feats[r.utterance_id] = features.stft_logpower(wave, wcfg).data
    ws.feats.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(ws.feats, feats)
    _write_json(ws.feats.with_name(ws.feats.name + ".json"),
                {"window": wcfg.to_dict(), "n_utterances": len(feats)})
    frames = sorted(f.shape[0] for f in feats.values())
    return ({"n_utterances": len(feats), "min_frames": frames[0],
             "max_frames": frames[-1]},
            {"features": ws.feats})


def _stage_train_pad(cfg, ws):
    records = _load_records(ws)
    feats = _load_feats(ws)
    parts = _partitions(records)
    pad, history = models.train_pad(
        feats, parts["train"], parts["dev"], family=cfg.pad_family,
        n_bins=cfg.window_config().n_bins, cfg=cfg.train_config())
    path = ws.models_dir / "pad.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    checksum = models.save_model(pad, path)

    dev_scores = evalmetrics.utterance_pad_scores(pad, feats, parts["dev"])
    bona = [dev_scores[r.utterance_id] for r in parts["dev"]
            if r.label == "bonafide"]
    spoof = [dev_scores[r.utterance_id] for r in parts["dev"]
             if r.label == "spoof"]
    dev_eer, tau_pad = evalmetrics.compute_eer(bona, spoof)
    thr_path = ws.models_dir / "pad_threshold.json"
    _write_json(thr_path, {"tau_pad": tau_pad, "dev_eer_spoof": dev_eer,
                           "checksum": checksum})
    return ({"dev_eer_spoof": dev_eer, "tau_pad": tau_pad,
             "epochs_run": len(history)},
            {"pad": path, "pad_threshold": thr_path})


def _stage_train_asv(cfg, ws):
    records = _load_records(ws)
    feats = _load_feats(ws)
    parts = _partitions(records)
    embedder, history = models.train_embedder(
        feats, parts["train"], parts["dev"],
        n_bins=cfg.window_config().n_bins,
        hidden=int(cfg.raw["models"]["embed_hidden"]),
        speech_bins=int(cfg.raw["models"]["embed_speech_bins"]),
        cfg=cfg.train_config(seed_shift=1))
    emb_path = ws.models_dir / "embedder.ckpt"
    emb_path.parent.mkdir(parents=True, exist_ok=True)
    checksum = models.save_model(embedder, emb_path)

    enrollments, _ = corpus.load_trials(ws.trials)
    speakers = {s: models.enroll_speaker(embedder, s,
                                         [feats[u] for u in utts])
                for s, utts in enrollments.items()}
    # Backend center: mean over enrolled speaker means. Stored with the
    # speakers so every later scoring path uses the same one.
    center = np.mean([speakers[s].mean_embedding for s in sorted(speakers)],
                     axis=0)
    spk_path = ws.models_dir / "speakers.ckpt"
    models.save_speakers(speakers, spk_path, center=center)

    dev_enroll, dev_test = _dev_split(parts, cfg.n_enroll)
    dev_speakers = {s: models.enroll_speaker(embedder, s,
                                             [feats[u] for u in utts])
                    for s, utts in dev_enroll.items()}
    dev_center = np.mean([dev_speakers[s].mean_embedding
                          for s in sorted(dev_speakers)], axis=0)
    tar, non = [], []
    for s, utts in sorted(dev_test.items()):
        for uid in utts:
            emb = embedder.embedding(feats[uid])
            for claimed in sorted(dev_speakers):
                score = models.asv_score(dev_speakers[claimed], emb,
                                         center=dev_center)
                (tar if claimed == s else non).append(score)
    dev_eer, tau_asv = evalmetrics.compute_eer(tar, non)
    thr_path = ws.models_dir / "asv_threshold.json"
    _write_json(thr_path, {"tau_asv": tau_asv, "dev_eer_asv": dev_eer,
                           "checksum": checksum})
    return ({"dev_eer_asv": dev_eer, "tau_asv": tau_asv,
             "epochs_run": len(history), "n_speakers": len(speakers)},
            {"embedder": emb_path, "speakers": spk_path,
             "asv_threshold": thr_path})


def _load_victims(ws):
    pad = models.load_model(ws.models_dir / "pad.ckpt")
    embedder = models.load_model(ws.models_dir / "embedder.ckpt")
    speakers, center = models.load_speakers(ws.models_dir / "speakers.ckpt")
    tau_pad = json.loads(
        (ws.models_dir / "pad_threshold.json").read_text())["tau_pad"]
    tau_asv = json.loads(
        (ws.models_dir / "asv_threshold.json").read_text())["tau_asv"]
    return pad, embedder, speakers, tau_pad, tau_asv, center


def _stage_distill_students(cfg, ws):
    if cfg.mode != "blackbox":
        return ({"skipped_reason": "whitebox mode needs no students"}, {})
    records = _load_records(ws)
    feats = _load_feats(ws)
    parts = _partitions(records)
    pad, embedder, speakers, tau_pad, tau_asv, center = _load_victims(ws)
    oracle = attacks.TeacherOracle(pad, embedder, speakers, tau_pad, tau_asv,
                                   center=center)

    cfg_pad = cfg.train_config(seed_shift=2)
    student_pad, _ = attacks.distill_student_pad(
        oracle, feats, parts["train"], parts["dev"],
        family=cfg.student_family, cfg=cfg_pad)
    pad_path = ws.students_dir / "pad.ckpt"
    pad_path.parent.mkdir(parents=True, exist_ok=True)
    models.save_model(student_pad, pad_path)

    anchor_records = [r for r in parts["train"] if r.label == "bonafide"]
    probes = attacks.make_probes(parts["train"], rng_seed=cfg.seed + 41)
    dev_probes = attacks.make_probes(parts["dev"], rng_seed=cfg.seed + 42)
    student_bvec, _ = attacks.distill_student_asv(
        oracle, embedder, feats, anchor_records, probes, dev_probes,
        cfg=cfg.train_config(seed_shift=3))
    bvec_path = ws.students_dir / "bvector.ckpt"
    models.save_model(student_bvec, bvec_path)

    anchors_mean = {}
    for r in anchor_records:
        anchors_mean.setdefault(r.speaker_id, []).append(
            embedder.embedding(feats[r.utterance_id]))
    anchors_mean = {s: np.mean(v, axis=0) for s, v in anchors_mean.items()}
    anchors_path = ws.students_dir / "anchors.ckpt"
    save_tensors(anchors_path, anchors_mean)

    pad_agree = attacks.pad_agreement(student_pad, oracle, feats,
                                      parts["eval"])
    asv_agree = attacks.asv_agreement(
        student_bvec, embedder, anchors_mean, oracle, feats,
        attacks.make_probes(parts["eval"], rng_seed=cfg.seed + 43))
    agree_path = ws.students_dir / "agreement.json"
    _write_json(agree_path, {"pad_agreement": pad_agree,
                             "asv_agreement": asv_agree,
                             "n_queries": oracle.n_queries})
    return ({"pad_agreement": pad_agree, "asv_agreement": asv_agree,
             "n_queries": oracle.n_queries},
            {"student_pad": pad_path, "student_bvector": bvec_path,
             "anchors": anchors_path, "agreement": agree_path})


def _attack_set_names(cfg):
    names = []
    for eps in cfg.epsilons:
        names.append(f"fgsm_eps{eps:g}")
    for eps in cfg.epsilons:
        names.append(f"pgd_eps{eps:g}")
    names.append("transform")
    return names


def _stage_attack(cfg, ws):
    records = _load_records(ws)
    feats = _load_feats(ws)
    parts = _partitions(records)
    pad, embedder, speakers, tau_pad, tau_asv, center = _load_victims(ws)
    a = cfg.raw["attack"]
    pgd_steps = int(a["pgd_steps"])
    eval_spoof = [r for r in parts["eval"] if r.label == "spoof"]
    train_spoof = [r for r in parts["train"] if r.label == "spoof"]
    dev_spoof = [r for r in parts["dev"] if r.label == "spoof"]
    tcfg = cfg.train_config(seed_shift=4, epochs=int(a["transform_epochs"]),
                            lr=float(a["transform_lr"]))

    victim_sums = {"pad": pad.checksum(), "embedder": embedder.checksum()}
    frozen = [("pad", pad, victim_sums["pad"]),
              ("embedder", embedder, victim_sums["embedder"])]
    if cfg.mode == "whitebox":
        grad_pad = pad
        net, history = attacks.train_transform_whitebox(
            pad, embedder, feats, train_spoof, dev_spoof,
            alpha=float(a["rerank_alpha"]),
            embed_weight=float(a["embed_weight"]), cfg=tcfg)
    else:
        grad_pad = models.load_model(ws.students_dir / "pad.ckpt")
        student_bvec = models.load_model(ws.students_dir / "bvector.ckpt")
        anchors_mean = load_tensors(ws.students_dir / "anchors.ckpt")
        # Distill-time checksums; training must hand the students back
        # byte-identical.
        for name in ("pad", "bvector"):
            sidecar = ws.students_dir / f"{name}.ckpt.json"
            module = grad_pad if name == "pad" else student_bvec
            frozen.append((f"student_{name}", module,
                           json.loads(sidecar.read_text())["checksum"]))
        net, history = attacks.train_transform_blackbox(
            grad_pad, student_bvec, embedder, anchors_mean, feats,
            train_spoof, dev_spoof, same_weight=float(a["same_weight"]),
            cfg=tcfg)
    for tag, module, want in frozen:
        if module.checksum() != want:
            raise StageError(f"{tag} changed during the attack stage")
    frozen_sums = {tag: want for tag, _, want in frozen}

    ws.attacks_dir.mkdir(parents=True, exist_ok=True)
    net_path = ws.attacks_dir / "transform.ckpt"
    save_tensors(net_path, net.state())
    _write_json(net_path.with_name(net_path.name + ".json"),
                {"kind": "transform", "seed": net.seed,
                 "checksum": net.checksum(), "epochs_run": len(history)})

    artifacts = {"transform_net": net_path}
    summary = {"mode": cfg.mode, "n_eval_spoof": len(eval_spoof),
               "frozen_checksums": frozen_sums, "sets": {}}
    for name in _attack_set_names(cfg):
        if name == "transform":
            adv = attacks.craft_attack_set("transform", grad_pad, feats,
                                           eval_spoof, net=net)
            meta = {"method": "transform", "mode": cfg.mode}
        elif name.startswith("fgsm_eps"):
            eps = float(name[len("fgsm_eps"):])
            adv = attacks.craft_attack_set("fgsm", grad_pad, feats,
                                           eval_spoof, eps=eps)
            meta = {"method": "fgsm", "eps": eps, "mode": cfg.mode}
        else:
            eps = float(name[len("pgd_eps"):])
            adv = attacks.craft_attack_set("pgd", grad_pad, feats,
                                           eval_spoof, eps=eps,
                                           n_steps=pgd_steps)
            meta = {"method": "pgd", "eps": eps, "n_steps": pgd_steps,
                    "mode": cfg.mode}
        disp = attacks.embedding_displacements(embedder, feats, adv)
        linf = max(float(np.max(np.abs(adv[uid] - feats[uid])))
                   for uid in adv)
        meta.update({
            "victim_checksums": victim_sums,
            "median_displacement": float(np.median(list(disp.values()))),
            "linf": linf,
        })
        path = ws.attacks_dir / f"{name}.adv"
        attacks.save_attack_set(path, adv, meta)
        artifacts[name] = path
        summary["sets"][name] = {"median_displacement":
                                 meta["median_displacement"], "linf": linf}
    return summary, artifacts


def _stage_evaluate(cfg, ws):
    records = _load_records(ws)
    feats = _load_feats(ws)
    pad, embedder, speakers, tau_pad, tau_asv, center = _load_victims(ws)
    _, trials = corpus.load_trials(ws.trials)

    attack_sets = {"no_attack": None}
    victim_sums = {"pad": pad.checksum(), "embedder": embedder.checksum()}
    for name in _attack_set_names(cfg):
        adv, meta = attacks.load_attack_set(ws.attacks_dir / f"{name}.adv")
        if meta["victim_checksums"] != victim_sums:
            raise StageError(f"attack set {name} was crafted against "
                             f"different victim parameters; rerun the "
                             f"attack stage")
        attack_sets[name] = adv

    results = evalmetrics.evaluate_system(pad, embedder, speakers, feats,
                                          records, trials, tau_pad,
                                          attack_sets, center=center)
    ws.scores_dir.mkdir(parents=True, exist_ok=True)
    eval_records = [r for r in records if r.partition == "eval"]
    artifacts = {}
    for name, adv in attack_sets.items():
        scored = evalmetrics.score_trials(pad, embedder, speakers, feats,
                                          eval_records, trials, tau_pad, adv,
                                          center=center)
        path = ws.scores_dir / f"{name}.tsv"
        evalmetrics.write_score_file(path, scored)
        artifacts[f"scores_{name}"] = path
    metrics_path = ws.scores_dir / "metrics.json"
    _write_json(metrics_path, {"results": results, "tau_pad": tau_pad,
                               "tau_asv": tau_asv})
    artifacts["metrics"] = metrics_path
    flat = {name: {k: None if v is None else round(v, 6)
                   for k, v in m.items()}
            for name, m in results.items()}
    return {"results": flat}, artifacts


def _stage_report(cfg, ws):
    payload = json.loads((ws.scores_dir / "metrics.json").read_text())
    meta = {"config_hash": cfg.config_hash(), "scenario": cfg.scenario,
            "mode": cfg.mode, "tau_pad": payload["tau_pad"],
            "tau_asv": payload["tau_asv"]}
    report = evalmetrics.build_report(payload["results"], meta)
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    tsv, js = ws.report_dir / "report.tsv", ws.report_dir / "report.json"
    evalmetrics.write_report_tsv(tsv, report)
    evalmetrics.write_report_json(js, report)
    return ({"rows": len(report["rows"])}, {"report_tsv": tsv,
                                            "report_json": js})


_STAGE_FN = {
    "gen-corpus": _stage_gen_corpus,
    "extract-features": _stage_extract_features,
    "train-pad": _stage_train_pad,
    "train-asv": _stage_train_asv,
    "distill-students": _stage_distill_students,
    "attack": _stage_attack,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def _stage_deps(stage, cfg):
    deps = {
        "gen-corpus": [],
        "extract-features": ["gen-corpus"],
        "train-pad": ["extract-features"],
        "train-asv": ["extract-features"],
        "distill-students": ["train-pad", "train-asv"],
        "attack": ["train-pad", "train-asv"],
        "evaluate": ["attack"],
        "report": ["evaluate"],
    }[stage]
    if stage == "attack" and cfg.mode == "blackbox":
        deps = deps + ["distill-students"]
    return deps


def run_stage(stage, cfg, ws, force=False, log=print):
    """Execute one stage with marker bookkeeping; returns the summary."""
    if stage not in _STAGE_FN:
        raise StageError(f"unknown stage {stage!r}")
    want_hash = cfg.config_hash()
    marker_path = ws.marker(stage)
    if marker_path.exists() and not force:
        marker = json.loads(marker_path.read_text())
        if marker["config_hash"] == want_hash:
            missing = [p for p in marker["artifacts"].values()
                       if not pathlib.Path(p).exists()]
            if not missing:
                log(f"[{stage}] up to date, skipping (use --force to rerun)")
                _append_run(ws, stage, want_hash, 0.0, skipped=True)
                return marker["summary"]

    for dep in _stage_deps(stage, cfg):
        dep_marker = ws.marker(dep)
        if not dep_marker.exists():
            raise StageError(f"stage '{stage}' requires '{dep}'; run "
                             f"'{dep}' first", code=2)
        dep_hash = json.loads(dep_marker.read_text())["config_hash"]
        if dep_hash != want_hash:
            raise StageError(
                f"stage '{dep}' artifacts were built from a different "
                f"config ({dep_hash[:12]} != {want_hash[:12]}); rerun "
                f"'{dep}' with the current config or clean the output root")

    start = time.monotonic()
    summary, artifacts = _STAGE_FN[stage](cfg, ws)
    wall = time.monotonic() - start
    digests = {name: _sha256_file(path) for name, path in artifacts.items()}
    _write_json(marker_path, {
        "stage": stage, "config_hash": want_hash, "summary": summary,
        "artifacts": {name: str(path) for name, path in artifacts.items()},
        "artifact_sha256": digests,
    })
    _append_run(ws, stage, want_hash, wall, skipped=False)
    log(f"[{stage}] done in {wall:.1f}s")
    return summary


def _append_run(ws, stage, config_hash, wall, skipped):
    ws.root.mkdir(parents=True, exist_ok=True)
    entry = {"stage": stage, "config_hash": config_hash,
             "wall_s": round(wall, 3), "skipped": skipped,
             "unix_time": round(time.time(), 3)}
    with open(ws.runs_log, "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def run(stage, cfg, ws, force=False, log=print):
    if stage == "all":
        for name in STAGES:
            run_stage(name, cfg, ws, force=force, log=log)
        return
    run_stage(stage, cfg, ws, force=force, log=log)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="spoofbench",
        description="Desk-scale spoofing-attack laboratory for a voice "
                    "biometrics cascade")
    parser.add_argument("stage", choices=STAGES + ("all",),
                        help="pipeline stage to run")
    parser.add_argument("--config", required=True,
                        help="experiment INI file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the corpus seed (changes the "
                             "effective config hash)")
    parser.add_argument("--force", action="store_true",
                        help="rerun even if the stage is up to date")
    parser.add_argument("--out", default=None,
                        help="output root (overrides SPOOFBENCH_OUT and "
                             "the config)")
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_ini(args.config, seed_override=args.seed)
        ws = Workspace(resolve_root(cfg, args.out))
        run(args.stage, cfg, ws, force=args.force)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except Exception as err:  # surface anything unexpected as exit 1
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
