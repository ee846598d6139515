"""Command line entry point: gen-data / train / eval / report.

Exit codes: 0 ok, 2 bad configuration, 3 bad or missing data, 4 anything
that fails while running.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import yaml

from lifelong_ps import evalkit
from lifelong_ps.lifelong import LifelongTrainer, Mode, TrainConfig, config_dict, train_config_from_dict, train_sequence
from lifelong_ps.losses import ABLATIONS, LossConfig, apply_ablations
from lifelong_ps.memory import SamplingScheme
from lifelong_ps.perception import CheckpointError, NetConfig, load_checkpoint, net_config_from_dict, save_checkpoint
from lifelong_ps.synthgen import (
    DatasetError,
    DomainDataset,
    DomainSpec,
    SpecError,
    default_specs,
    generate_domain,
    load_dataset,
    save_dataset,
    spec_from_dict,
    spec_to_dict,
)

log = logging.getLogger("lifelong_ps")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "LPS_OUTPUT_ROOT"
DATA_INDEX = "index.json"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    domains: list[DomainSpec]
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    ablate: tuple[str, ...] = ()

    @property
    def mode(self) -> Mode:
        return Mode(self.train.mode)

    def validate(self) -> None:
        try:
            for s in self.domains:
                s.validate()
            self.train.validate()
            self.loss.validate()
        except (SpecError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not self.domains:
            raise ConfigError("no domains configured")
        ids = [s.domain_id for s in self.domains]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate domain ids {ids}")
        if any(tuple(s.image_size) != tuple(self.net.image_size) for s in self.domains):
            raise ConfigError("domain image_size must match net.image_size")

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "domains": [spec_to_dict(s) for s in self.domains],
            "train": config_dict(self.train),
            "loss": asdict(self.loss),
            "net": asdict(self.net),
            "ablate": list(self.ablate),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _checked(cls, d: dict | None, what: str) -> dict:
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    return d


def _domains_from(cfg: dict, seed: int, image_size: tuple[int, int]) -> list[DomainSpec]:
    data = dict(cfg.get("data") or {})
    if "domains" in data:
        try:
            specs = [spec_from_dict({"seed": seed, "image_size": image_size, **d}) for d in data.pop("domains")]
        except TypeError as exc:
            raise ConfigError(f"bad domain spec: {exc}") from exc
        if data:
            raise ConfigError(f"data.domains cannot be combined with {sorted(data)}")
        return specs
    n = int(data.pop("num_domains", 3))
    allowed = {"num_scenes", "num_identities", "unlabeled_fraction"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown data keys: {unknown}")
    specs = default_specs(seed=seed, image_size=image_size, **data)
    if not 1 <= n <= len(specs):
        raise ConfigError(f"num_domains must lie in [1, {len(specs)}]")
    return specs[:n]


def load_run_config(
    path: str | Path | None,
    seed: int | None = None,
    mode: str | None = None,
    ablate: Sequence[str] = (),
    sampling: str | None = None,
) -> tuple[RunConfig, str]:
    """Parse a YAML config and apply command-line overrides.

    Returns the validated config and the raw config text (for the snapshot).
    """
    text = ""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - {"seed", "data", "train", "loss", "net", "ablate"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    try:
        net = net_config_from_dict(_checked(NetConfig, raw.get("net"), "net"))
        tdict = _checked(TrainConfig, raw.get("train"), "train")
        tdict["seed"] = seed
        if mode is not None:
            tdict["mode"] = mode
        if sampling is not None:
            tdict["sampling"] = sampling
        train = train_config_from_dict(tdict)
        loss = LossConfig(**_checked(LossConfig, raw.get("loss"), "loss"))
        names = tuple(raw.get("ablate") or ()) + tuple(ablate)
        loss = apply_ablations(loss, list(names))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if Mode(train.mode) is not Mode.LPS:
        # no rehearsal outside lifelong mode
        loss = replace(loss, use_dkd=False, use_rkd_plus=False, use_rkd_basic=False, use_rim=False)
    rc = RunConfig(_domains_from(raw, seed, tuple(net.image_size)), train, loss, net, seed, names)
    rc.validate()
    return rc, text


def resolve_out(path: str | Path) -> Path:
    """Relative output paths are placed under $LPS_OUTPUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.parent.mkdir(parents=True, exist_ok=True)


# -- data --------------------------------------------------------------------------


def cmd_gen_data(rc: RunConfig, out: Path, force: bool = False) -> list[Path]:
    _prepare_out(out, force)
    # write into a sibling temp dir first so a failure leaves nothing behind
    tmp = Path(tempfile.mkdtemp(prefix=".gen-", dir=out.parent))
    try:
        entries = []
        for spec in rc.domains:
            name = f"domain_{spec.domain_id}"
            save_dataset(generate_domain(spec), tmp / name)
            entries.append(name)
        (tmp / DATA_INDEX).write_text(json.dumps({"domains": entries}, indent=1), encoding="utf-8")
        if out.exists():
            out.rmdir()
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return [out / e for e in entries]


def load_domains(data_dir: str | Path) -> list[DomainDataset]:
    data_dir = Path(data_dir)
    index = data_dir / DATA_INDEX
    if not index.is_file():
        raise DatasetError(f"missing dataset index {index}")
    names = json.loads(index.read_text(encoding="utf-8"))["domains"]
    out = []
    for name in names:
        d = data_dir / name
        if not d.is_dir():
            raise DatasetError(f"missing dataset {name} in {data_dir}")
        out.append(load_dataset(d))
    return out


def parse_order(order: str | None, n: int) -> list[int]:
    if order is None:
        return list(range(n))
    try:
        perm = [int(x) for x in order.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --order {order!r}") from exc
    if sorted(perm) != list(range(n)):
        raise ConfigError(f"--order must be a permutation of 0..{n - 1}, got {order!r}")
    return perm


# -- train ---------------------------------------------------------------------------


def _save_stage(trainer: LifelongTrainer, run: Path, digest: str) -> None:
    st = trainer.history[-1]
    d = run / "checkpoints" / f"stage_{st['stage']}"
    save_checkpoint(trainer.model, d, len(trainer.trained), digest, {"trained_domain": st["trained_domain"]})
    lut = trainer.lut.state()
    np.savez(
        d / "rehearsal.npz",
        lut_ids=np.asarray(lut["ids"], dtype=np.int64),
        lut_vectors=lut["vectors"],
        queue=trainer.queue.state()["features"],
        exemplars=json.dumps({str(k): list(v) for k, v in trainer.exemplars.indices.items()}),
    )


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(rc: RunConfig, config_text: str, data_dir: Path, out: Path, order: str | None = None, force: bool = False) -> Path:
    domains = load_domains(data_dir)
    perm = parse_order(order, len(domains))
    domains = [domains[i] for i in perm]
    _prepare_out(out, force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config_text, encoding="utf-8")
    _write_json(out / "resolved_config.json", {**rc.to_dict(), "order": perm, "data": str(data_dir)})
    digest = rc.digest()
    torch.manual_seed(rc.seed)
    with open(out / "steps.jsonl", "w", encoding="utf-8") as steps:

        def step_log(rec: dict) -> None:
            steps.write(json.dumps(rec, sort_keys=True) + "\n")

        _, history, trainer = train_sequence(
            domains, rc.train, rc.loss, rc.net, step_log, on_stage_end=lambda t: _save_stage(t, out, digest)
        )
    _write_json(out / "history.json", history)
    _write_json(out / "epoch_checks.json", trainer.epoch_checks)
    _write_json(out / "diagnostics.json", trainer.diagnostics)
    return out


# -- eval / report -------------------------------------------------------------------


def final_checkpoint(run: Path) -> Path:
    ckpts = sorted((run / "checkpoints").glob("stage_*"), key=lambda p: int(p.name.split("_")[1]))
    if not ckpts:
        raise CheckpointError(f"no checkpoint in {run}")
    return ckpts[-1]


def cmd_eval(run: Path, data_dir: Path) -> dict:
    model, manifest = load_checkpoint(final_checkpoint(run))
    report = {"checkpoint": manifest.get("trained_domain"), "metrics": {}}
    for ds in load_domains(data_dir):
        report["metrics"][str(ds.domain_id)] = evalkit.evaluate_model(model, ds)
    _write_json(run / "metrics.json", report)
    rows = [{"stage": "final", "trained": report["checkpoint"], "mode": "eval", "eval_domain": d, **m} for d, m in report["metrics"].items()]
    (run / "metrics.tsv").write_text(evalkit.rows_to_tsv(rows), encoding="utf-8")
    return report


def _load_history(run: Path) -> list[dict]:
    p = run / "history.json"
    if not p.is_file():
        raise CheckpointError(f"missing history in {run}")
    return json.loads(p.read_text(encoding="utf-8"))


def cmd_report(runs: Sequence[Path], out: Path | None = None) -> str:
    """Render the stage and final tables plus forgetting plots.

    Tables go to ``report.tsv`` (and the return value, with ``### name``
    section delimiters); plots to ``forgetting_<metric>.png`` when some run has more than one stage.
    """
    from lifelong_ps.plotting import plot_forgetting

    out = out or runs[0]
    out.mkdir(parents=True, exist_ok=True)
    histories = {r.name: _load_history(r) for r in runs}
    parts = []
    for name, hist in histories.items():
        parts.append(f"### stages {name}\n" + evalkit.rows_to_tsv(evalkit.stage_table(hist)))
        parts.append(f"### final {name}\n" + evalkit.final_table(hist))
        if len(hist) > 1:
            parts.append(
                f"### old-domain {name}\nmetric\tvalue\nap\t{evalkit.old_domain_average(hist, 'ap'):.6f}\nmap\t{evalkit.old_domain_average(hist, 'map'):.6f}\n"
            )
    text = "\n".join(parts)
    (out / "report.tsv").write_text(text, encoding="utf-8")
    # a single-stage history (e.g. JOINT) has no trajectory to draw
    plottable = {k: h for k, h in histories.items() if len(h) > 1}
    if plottable:
        for metric in ("ap", "map"):
            plot_forgetting(plottable, metric, out / f"forgetting_{metric}.png")
    return text


# -- argparse ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifelong-ps", description="Lifelong person search on synthetic domains.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path, help="YAML run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV})")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    g = sub.add_parser("gen-data", help="render synthetic domain datasets")
    common(g)

    t = sub.add_parser("train", help="train a domain sequence")
    common(t)
    t.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    t.add_argument("--mode", choices=[m.value for m in Mode])
    t.add_argument("--order", help="comma-separated domain permutation, e.g. 2,0,1")
    t.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATIONS))
    t.add_argument("--sampling", choices=[s.value for s in SamplingScheme])

    e = sub.add_parser("eval", help="evaluate a run's final checkpoint")
    e.add_argument("--run", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)

    r = sub.add_parser("report", help="tables and forgetting plots for one or more runs")
    r.add_argument("--run", type=Path, action="append", required=True)
    r.add_argument("--out", help="where to write report files (default: first run)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-data":
            rc, _ = load_run_config(args.config, args.seed)
            for d in cmd_gen_data(rc, resolve_out(args.out), args.force):
                print(d)
        elif args.command == "train":
            rc, text = load_run_config(args.config, args.seed, args.mode, args.ablate, args.sampling)
            run = cmd_train(rc, text, args.data, resolve_out(args.out), args.order, args.force)
            print(evalkit.final_table(_load_history(run)), end="")
            print(run)
        elif args.command == "eval":
            rep = cmd_eval(args.run, args.data)
            print((args.run / "metrics.tsv").read_text(encoding="utf-8"), end="")
            log.info("evaluated %s", rep["checkpoint"])
        elif args.command == "report":
            out = resolve_out(args.out) if args.out else None
            print(cmd_report(args.run, out), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
