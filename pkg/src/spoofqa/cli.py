"""spoofqa command line: synth, sample, train, eval, zeroshot, score, report.

Every failure exits nonzero with one ``error: <kind>: <message>`` line on
stderr. Usage errors exit 2, runtime errors 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shlex
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path


from . import checkpoint
from .corpus import (Key, Protocol, SamplingSpec, Split, SynthSpec, load_manifest,
                     read_protocol, serialize_protocol, subsample, synth_generate)
from .frontend import load_wav, log_mel
from .metrics import (ConfusionCounts, ScoreSet, det_points, eq2_metrics, roc_points,
                      summarize)
from .model import ModelConfig, build_model
from .scorer import (Category, CommandAdjudicator, PromptBank, ScriptedAdjudicator,
                     categorize, classify_response, generate, judge, p_fake)
from .trainer import FeatureCache, TrainConfig, make_sft_dataset, score_mels, train

log = logging.getLogger("spoofqa")

ADJUDICATOR_ENV = "SPOOFQA_ADJUDICATOR_STUB"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_trials(path: str | Path, audio_root: str | Path | None = None,
                 split: Split = Split.EVAL) -> Protocol:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"protocol not found: {path}")
    if path.suffix.lower() == ".csv":
        return load_manifest(path.read_text(), base_dir=audio_root or path.parent)
    return read_protocol(path, audio_root, split=split)


def _write_points(path: Path, header: tuple[str, str], pts) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for a, b in pts:
            w.writerow([f"{a:.10g}", f"{b:.10g}"])


def write_scores(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["utt_id", "key", "p_fake"])
        for utt, key, p in rows:
            w.writerow([utt, key.value, repr(float(p))])


def read_scores(path: Path) -> list[tuple[str, Key, float]]:
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        head = next(r, None)
        if head != ["utt_id", "key", "p_fake"]:
            raise ValueError(f"{path}: expected header utt_id,key,p_fake")
        for i, row in enumerate(r, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}: line {i}: expected 3 columns")
            rows.append((row[0], Key(row[1]), float(row[2])))
    return rows


def write_report(out: Path, scores: ScoreSet, threshold: float) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(scores, threshold).as_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_points(out / "roc.csv", ("far", "tpr"), roc_points(scores))
    _write_points(out / "det.csv", ("far", "frr"), det_points(scores))
    return summary


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a) -> int:
    spec = SynthSpec(a.real, a.fake, a.duration, seed=a.seed)
    out = Path(a.out)
    p = synth_generate(spec, out, Split(a.split), prefix=a.prefix)
    (out / "protocol.txt").write_text(serialize_protocol(p))
    n_real, n_fake = p.counts()
    print(f"wrote {len(p)} clips ({n_real} bonafide, {n_fake} spoof) and {out / 'protocol.txt'}")
    return 0


def cmd_sample(a) -> int:
    if a.split != "train":
        raise UsageError("subsampling applies to the train split only")
    p = read_protocol(a.protocol, split=Split.TRAIN)
    sub = subsample(p, SamplingSpec(a.k, a.seed))
    Path(a.out).write_text(serialize_protocol(sub))
    n_real, n_fake = sub.counts()
    print(f"k={a.k}: kept {n_real} bonafide, {n_fake} spoof of {len(p)}")
    return 0


@dataclass
class RunConfig:
    train_protocol: str = ""
    dev_protocol: str | None = None
    audio_root: str | None = None
    checkpoint: str = "model.ckpt"
    log: str | None = None
    prompt_index: int = 1
    model_seed: int = 0
    base_checkpoint: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        d = json.loads(path.read_text())
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        # relative paths in a config file are relative to that file
        for k in ("train_protocol", "dev_protocol", "audio_root", "checkpoint", "log",
                  "base_checkpoint"):
            v = getattr(cfg, k)
            if v and not Path(v).is_absolute():
                setattr(cfg, k, str(path.parent / v))
        return cfg

    def validate(self) -> None:
        if not self.train_protocol:
            raise UsageError("no training protocol given (config train_protocol or --train-protocol)")
        for k in ("train_protocol", "dev_protocol", "base_checkpoint"):
            v = getattr(self, k)
            if v and not Path(v).exists():
                raise FileNotFoundError(f"{k} not found: {v}")
        if not 1 <= self.prompt_index <= 5:
            raise UsageError("prompt_index must be in 1..5")


def cmd_train(a) -> int:
    rc = RunConfig.load(a.config)
    for flag, key in (("train_protocol", "train_protocol"), ("dev_protocol", "dev_protocol"),
                      ("audio_root", "audio_root"), ("out", "checkpoint"), ("log", "log"),
                      ("prompt_index", "prompt_index"), ("base", "base_checkpoint"),
                      ("model_seed", "model_seed")):
        v = getattr(a, flag)
        if v is not None:
            setattr(rc, key, v)
    for flag in ("mode", "epochs", "lr", "seed", "lora_r", "batch_size", "warmup_ratio"):
        v = getattr(a, flag)
        if v is not None:
            rc.train[flag] = v
    rc.validate()
    tcfg = TrainConfig.from_dict(rc.train)
    q = PromptBank.get(rc.prompt_index, with_suffix=False)

    if rc.base_checkpoint:
        model, _ = checkpoint.load(rc.base_checkpoint)
    else:
        model = build_model(ModelConfig(**rc.model), seed=rc.model_seed)
    train_p = _load_trials(rc.train_protocol, rc.audio_root, Split.TRAIN)
    dev = None
    if rc.dev_protocol:
        dev = make_sft_dataset(_load_trials(rc.dev_protocol, rc.audio_root, Split.DEV), q)

    t0 = time.time()
    model, tlog = train(model, make_sft_dataset(train_p, q), tcfg, dev=dev,
                        features=FeatureCache(model.cfg.n_mels))
    print(f"mode={tlog.mode} encoder_frozen={tlog.mode == 'star'} "
          f"trainable_params={tlog.trainable}")
    for rec in tlog.epochs:
        print(json.dumps(rec))
    ckpt = Path(rc.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, ckpt, meta={"train_config": tcfg.to_dict(), "prompt": q,
                                       "best_epoch": tlog.best_epoch})
    log_path = Path(rc.log) if rc.log else ckpt.with_suffix(".log.jsonl")
    tlog.write_jsonl(log_path)
    print(f"wrote {ckpt} and {log_path} in {time.time() - t0:.1f}s")
    return 0


def _prompt_for(header: dict, index: int | None) -> str:
    if index is not None:
        return PromptBank.get(index, with_suffix=False)
    return header.get("meta", {}).get("prompt") or PromptBank.get(1, with_suffix=False)


def cmd_eval(a) -> int:
    model, header = checkpoint.load(a.checkpoint)
    p = _load_trials(a.protocol, a.audio_root)
    q = _prompt_for(header, a.prompt_index)
    fc = FeatureCache(model.cfg.n_mels)
    probs = score_mels(model, [fc.mel(u) for u in p], q)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.csv", [(u.utt_id, u.key, pr) for u, pr in zip(p, probs)])
    summary = write_report(out, ScoreSet.from_pairs(zip(probs, (u.key for u in p))),
                           a.threshold)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _adjudicator(a):
    if a.adjudicator_cmd:
        return CommandAdjudicator(shlex.split(a.adjudicator_cmd))
    path = a.adjudicator_script or os.environ.get(ADJUDICATOR_ENV)
    return ScriptedAdjudicator(path) if path else None


def cmd_zeroshot(a) -> int:
    model, _ = checkpoint.load(a.checkpoint)
    p = _load_trials(a.protocol, a.audio_root)
    yes_no = PromptBank.is_yes_no(a.prompt_index)
    q = PromptBank.get(a.prompt_index, with_suffix=not a.no_suffix)
    fc = FeatureCache(model.cfg.n_mels)
    responses = [generate(model, fc.mel(u), q, a.max_new_tokens) for u in p]

    client = None
    needs = [r for r in responses if classify_response(r, yes_no).verdict.value == "Not sure"]
    if needs and not a.no_adjudicator:
        client = _adjudicator(a)
        if client is None:
            raise UsageError(f"{len(needs)} responses need adjudication but no adjudicator "
                             f"is configured (--adjudicator-script, --adjudicator-cmd or "
                             f"${ADJUDICATOR_ENV})")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    counts: Counter = Counter()
    with open(out / "responses.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["utt_id", "key", "response", "verdict", "source", "category"])
        for u, res in zip(p, responses):
            if a.no_adjudicator:
                v = classify_response(res, yes_no)
            else:
                v = judge(res, client, yes_no)
            cat = categorize(u.key, v)
            counts[cat] += 1
            w.writerow([u.utt_id, u.key.value, res, v.verdict.value, v.source.value, cat.value])
    n_real, n_fake = p.counts()
    cc = ConfusionCounts(counts[Category.TP], counts[Category.TN], counts[Category.FP],
                         counts[Category.FN], counts[Category.FAIL], n_real, n_fake)
    m = eq2_metrics(cc)
    summary = {"prompt_index": a.prompt_index, "prompt": q,
               "counts": {c.value: counts[c] for c in Category},
               "accuracy": m.accuracy, "precision": m.precision, "mrecall": m.mrecall,
               "mf1": m.mf1, "degenerate": m.degenerate}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_score(a) -> int:
    model, header = checkpoint.load(a.checkpoint)
    q = _prompt_for(header, a.prompt_index)
    mel = log_mel(load_wav(a.wav), n_mels=model.cfg.n_mels)
    pf = p_fake(model, mel, q)
    verdict = "Fake" if pf >= a.threshold else "Real"
    print(f"{Path(a.wav).stem} {pf:.6f} {verdict}")
    return 0


def cmd_report(a) -> int:
    rows = read_scores(Path(a.scores))
    s = ScoreSet.from_pairs((p, k) for _, k, p in rows)
    summary = write_report(Path(a.out), s, a.threshold)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message} (see {self.prog} --help)\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spoofqa", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic labelled corpus")
    s.add_argument("--real", type=int, required=True, help="number of bonafide clips")
    s.add_argument("--fake", type=int, required=True, help="number of spoof clips")
    s.add_argument("--seed", type=int, default=0, help="generation seed")
    s.add_argument("--out", required=True, help="output directory (WAVs + protocol.txt)")
    s.add_argument("--duration", type=float, default=1.0, help="clip length in seconds")
    s.add_argument("--split", choices=[x.value for x in Split], default="train",
                   help="split label recorded for the corpus")
    s.add_argument("--prefix", default="SYN", help="utterance id prefix")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample", help="ASV@1/k subsampling of a train protocol")
    s.add_argument("--protocol", required=True, help="input CM protocol")
    s.add_argument("--k", type=int, required=True, help="keep floor(n/k) of each class")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--out", required=True, help="output protocol path")
    s.add_argument("--split", default="train", help="split of the input (train only)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="LoRA fine-tuning")
    s.add_argument("--config", help="JSON run config; flags override it")
    s.add_argument("--train-protocol", help="training protocol or manifest")
    s.add_argument("--dev-protocol", help="dev protocol for per-epoch EER and selection")
    s.add_argument("--audio-root", help="directory holding the audio (default: protocol dir)")
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--log", help="training log path (JSON lines)")
    s.add_argument("--base", help="start from this full checkpoint")
    s.add_argument("--model-seed", type=int, help="seed for a freshly initialised model")
    s.add_argument("--prompt-index", type=int, choices=range(1, 6), help="instruction template")
    s.add_argument("--mode", choices=["star", "triangle"], help="star: frozen encoder")
    s.add_argument("--epochs", type=int, help="training epochs")
    s.add_argument("--lr", type=float, help="peak learning rate")
    s.add_argument("--seed", type=int, help="shuffling and adapter seed")
    s.add_argument("--lora-r", type=int, help="adapter rank")
    s.add_argument("--batch-size", type=int, help="examples per step")
    s.add_argument("--warmup-ratio", type=float, help="fraction of steps in linear warmup")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a protocol and write metrics")
    s.add_argument("--checkpoint", required=True, help="full checkpoint")
    s.add_argument("--protocol", required=True, help="CM protocol or CSV manifest")
    s.add_argument("--audio-root", help="directory holding the audio")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--prompt-index", type=int, choices=range(1, 6), help="instruction template")
    s.add_argument("--threshold", type=float, default=0.5, help="ACC threshold on p_fake")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("zeroshot", help="free-text answers classified into five classes")
    s.add_argument("--checkpoint", required=True, help="full checkpoint")
    s.add_argument("--protocol", required=True, help="CM protocol or CSV manifest")
    s.add_argument("--audio-root", help="directory holding the audio")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--prompt-index", type=int, choices=range(1, 6), default=1,
                   help="zero-shot template 1..5")
    s.add_argument("--no-suffix", action="store_true", help="drop the answer-format sentence")
    s.add_argument("--max-new-tokens", type=int, default=8, help="greedy decoding budget")
    s.add_argument("--adjudicator-script", help="file of scripted adjudicator replies")
    s.add_argument("--adjudicator-cmd", help="command answering prompts on stdin")
    s.add_argument("--no-adjudicator", action="store_true",
                   help="count rule-level NotSure as Fail without adjudication")
    s.set_defaults(func=cmd_zeroshot)

    s = sub.add_parser("score", help="P(Fake) for one WAV file")
    s.add_argument("--checkpoint", required=True, help="full checkpoint")
    s.add_argument("--wav", required=True, help="16 kHz PCM16 mono WAV")
    s.add_argument("--prompt-index", type=int, choices=range(1, 6), help="instruction template")
    s.add_argument("--threshold", type=float, default=0.5, help="verdict threshold on p_fake")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("report", help="metrics and ROC/DET from a scores CSV")
    s.add_argument("--scores", required=True, help="utt_id,key,p_fake CSV")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threshold", type=float, default=0.5, help="ACC threshold on p_fake")
    s.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - single-line reason for every failure
        msg = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
