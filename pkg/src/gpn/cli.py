"""Command-line entry point: ``gpn {train,eval,grad-analysis,param-analysis,convert}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .autodiff import NonFiniteError
from .checkpoint import CheckpointBundle, CheckpointError
from .datasets import (BinnedDataset, FormatError, SpikeEventSequence, batch_iter, save_events,
                       split_train_val)
from .network import ArchitectureError, Network, parse_architecture, with_neuron_kind
from .neurons import DEFAULT_BETA, DEFAULT_VTH, NeuronConfig, NeuronKind
from .training import (SHD_RECIPE, SSC_RECIPE, DivergenceError, TrainConfig, ablation_grid, evaluate,
                       train)

log = logging.getLogger("gpn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

RECIPES = {"shd": dict(SHD_RECIPE, arch="FC1024-GPN1024-DP-FC20"),
           "ssc": dict(SSC_RECIPE, arch="(FC1024-GPN1024-DP)*3-FC35")}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "shd"
    data_dir: str = "data"
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    out_dir: str = "runs/latest"
    arch: str | None = None
    neuron: str | None = None
    ablate: list = field(default_factory=list)
    beta: float | None = None
    vth: float | None = None
    alpha: float = 0.5
    detach_reset: bool = True
    T: int | None = None
    lr: float | None = None
    batch: int | None = None
    epochs: int | None = None
    loss_mode: str = "all_step"
    lr_decay: float = 0.5
    lr_patience: int = 5
    early_stop: int = 20
    seed: int = 0
    augment: str = "per_step"
    dropout: float = 0.25
    average: str = "logits"
    val_fraction: float = 0.15
    window: float = 1.0
    grid: bool = False

    def resolve(self) -> "RunConfig":
        """Fill unset recipe fields from the dataset's default training recipe."""
        recipe = RECIPES.get(self.dataset.lower(), RECIPES["shd"])
        for key, rkey in (("T", "steps"), ("lr", "lr"), ("batch", "batch_size"),
                          ("epochs", "max_epochs"), ("arch", "arch")):
            if getattr(self, key) is None:
                setattr(self, key, recipe[rkey])
        return self

    def problems(self) -> list[str]:
        out = []
        try:
            layers = self.layers()
        except (ArchitectureError, ValueError) as err:
            out.append(f"arch: {err}")
            layers = None
        try:
            self.neuron_config(layers)
        except ValueError as err:
            out.append(f"neuron: {err}")
        try:
            self.train_config()
        except ValueError as err:
            out.extend(f"train: {p}" for p in str(err).split("; "))
        if not 0 <= self.dropout < 1:
            out.append("dropout must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            out.append("val_fraction must lie in (0, 1)")
        return out

    def layers(self):
        layers = parse_architecture(self.arch, self.dropout)
        if self.neuron:
            layers = with_neuron_kind(layers, NeuronKind.parse(self.neuron))
        return layers

    def neuron_config(self, layers=None) -> NeuronConfig:
        layers = layers if layers is not None else self.layers()
        kinds = {l.kind for l in layers if l.is_neuron}
        kind = NeuronKind(next(iter(kinds))) if len(kinds) == 1 else NeuronKind.GPN
        ablation = frozenset(a.upper().replace("&", "") for a in self.ablate)
        if ablation and NeuronKind.GPN.value not in kinds:
            raise ValueError("gate ablations apply to GPN layers only")
        beta, vth = self.beta, self.vth
        if self.grid:  # placeholders; the grid supplies the real values
            beta = DEFAULT_BETA if beta is None else beta
            vth = DEFAULT_VTH if vth is None else vth
        return NeuronConfig(kind=kind, beta=beta, alpha=self.alpha, v_th=vth,
                            ablation=ablation, detach_reset=self.detach_reset)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.T, lr=self.lr, batch_size=self.batch, max_epochs=self.epochs,
                           loss_mode=self.loss_mode, lr_decay_factor=self.lr_decay,
                           lr_patience=self.lr_patience, early_stop_patience=self.early_stop,
                           seed=self.seed, augment=None if self.augment == "none" else self.augment,
                           average=self.average)

    def paths(self) -> dict[str, Path | None]:
        base = Path(self.data_dir)
        name = self.dataset.lower()
        val = Path(self.val_path) if self.val_path else base / f"{name}_valid.spk"
        return {
            "train": Path(self.train_path) if self.train_path else base / f"{name}_train.spk",
            "val": val if (self.val_path or val.exists()) else None,
            "test": Path(self.test_path) if self.test_path else base / f"{name}_test.spk",
        }


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected key-value pairs"])
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError([f"{path}: unknown key {k!r}" for k in unknown])
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None and v != []:
            values[key] = v
    if isinstance(values.get("ablate"), str):
        values["ablate"] = [values["ablate"]]
    values["ablate"] = [a for item in values.get("ablate", []) for a in str(item).split(",") if a]
    cfg = RunConfig(**values).resolve()
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def write_sidecar(cfg: RunConfig, out_dir: Path, name: str = "run_config.json") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    resolved = asdict(cfg)
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# data


def load_splits(cfg: RunConfig, steps: int | None = None):
    """Binned (train, val, test) datasets per the config."""
    steps = steps or cfg.T
    paths = cfg.paths()
    for key in ("train", "test"):
        if not paths[key].exists():
            raise DataError(f"{key} data not found: {paths[key]}")
    train_all = BinnedDataset.from_file(paths["train"], steps, cfg.window)
    test = BinnedDataset.from_file(paths["test"], steps, cfg.window)
    if paths["val"] is not None:
        return train_all, BinnedDataset.from_file(paths["val"], steps, cfg.window), test
    split = split_train_val(len(train_all), cfg.val_fraction, cfg.seed)
    return train_all.subset(split.train), train_all.subset(split.validation), test


def check_channels(net: Network, data: BinnedDataset):
    if data.channels != net.in_channels:
        raise DataError(f"data has {data.channels} channels but the network expects {net.in_channels}")


# ---------------------------------------------------------------------------
# commands


def _train_once(cfg: RunConfig, splits):
    train_ds, val_ds, test_ds = splits
    net = Network(cfg.layers(), train_ds.channels, cfg.neuron_config(), seed=cfg.seed,
                  dropout=cfg.dropout)
    check_channels(net, val_ds)
    check_channels(net, test_ds)
    return train(net, train_ds, val_ds, cfg.train_config(), test_data=test_ds)


def cmd_train(cfg: RunConfig) -> CheckpointBundle:
    splits = load_splits(cfg)
    out = Path(cfg.out_dir)
    write_sidecar(cfg, out)
    combos = ablation_grid(set(cfg.neuron_config().ablation)) if cfg.grid else []
    if not combos:
        result = _train_once(cfg, splits)
    else:
        # choose the fixed constants of ablated gates by validation accuracy
        rows, result = [], None
        for combo in combos:
            trial = replace(cfg, beta=combo.get("beta", cfg.beta), vth=combo.get("v_th", cfg.vth))
            res = _train_once(trial, splits)
            rows.append((trial.beta, trial.vth, res.checkpoint.val_acc, res.metrics.test_acc))
            log.info("grid beta=%s v_th=%s: val %.4f", trial.beta, trial.vth, res.checkpoint.val_acc)
            if result is None or res.checkpoint.val_acc > result.checkpoint.val_acc:
                result = res
        with open(out / "grid.csv", "w", newline="") as fh:
            fh.write("beta,v_th,val_acc,test_acc\n")
            for row in rows:
                fh.write(",".join("" if v is None else repr(float(v)) for v in row) + "\n")
    ck = result.checkpoint
    ck.extra.update({"T": cfg.T, "dataset": cfg.dataset, "val_fraction": cfg.val_fraction,
                     "window": cfg.window, "test_acc": result.metrics.test_acc})
    ck.save(out / "checkpoint.gpnw")
    result.metrics.to_csv(out / "metrics.csv")
    print(f"best epoch {ck.epoch}  val_acc {ck.val_acc:.4f}  test_acc {result.metrics.test_acc:.4f}")
    return ck


def _data_for_checkpoint(ck: CheckpointBundle, cfg: RunConfig, split: str) -> BinnedDataset:
    cfg.T = int(ck.extra.get("T", cfg.T))
    cfg.seed = ck.seed
    cfg.val_fraction = ck.extra.get("val_fraction", cfg.val_fraction)
    cfg.window = ck.extra.get("window", cfg.window)
    train_ds, val_ds, test_ds = load_splits(cfg)
    return {"train": train_ds, "val": val_ds, "test": test_ds}[split]


def cmd_eval(checkpoint: str, cfg: RunConfig, split: str = "test") -> float:
    ck = CheckpointBundle.load(checkpoint)
    net = ck.to_network()
    data = _data_for_checkpoint(ck, cfg, split)
    check_channels(net, data)
    acc = evaluate(net, data)
    print(f"{acc:.4f}")
    return acc


def cmd_grad_analysis(cfg: RunConfig, steps_list: list[int], target: str = "spike_input",
                      experiment: str = "grad") -> list[Path]:
    layers = cfg.layers()
    if sum(l.is_neuron for l in layers) != 1:
        raise ConfigError(["grad-analysis needs an architecture with exactly one spiking layer"])
    out = Path(cfg.out_dir)
    write_sidecar(cfg, out)
    written = []
    for steps in steps_list:
        train_ds, val_ds, test_ds = load_splits(cfg, steps)
        net = Network(layers, train_ds.channels, cfg.neuron_config(layers), seed=cfg.seed,
                      dropout=cfg.dropout)
        tcfg = cfg.train_config()
        tcfg.steps = steps
        epoch, initial, final = analysis.train_to_preconvergence(net, train_ds, val_ds, tcfg)
        log.info("T=%d: pre-convergence epoch %d (loss %.4f -> %.4f)", steps, epoch, initial, final)
        idx = next(batch_iter(np.arange(len(test_ds)), tcfg.batch_size))
        x, y = test_ds.batch(idx)
        kind = net.spiking_layers[0].cfg.kind.value.lower()
        rec = analysis.grad_vs_time(net, x, y, target=target,
                                    meta={"epoch": epoch, "initial_loss": initial})
        path = out / analysis.analysis_filename(experiment, kind, steps)
        analysis.export_analysis(rec, path)
        written.append(path)
        print(path)
    return written


def cmd_param_analysis(checkpoint: str, cfg: RunConfig, batch: int = 128,
                       bins: int = analysis.DEFAULT_BINS):
    ck = CheckpointBundle.load(checkpoint)
    if ck.neuron.get("kind") != NeuronKind.GPN.value:
        raise ConfigError([f"param-analysis needs a GPN checkpoint, got {ck.neuron.get('kind')}"])
    net = ck.to_network()
    data = _data_for_checkpoint(ck, cfg, "test")
    check_channels(net, data)
    idx = np.arange(min(batch, len(data)))
    x, _ = data.batch(idx)
    gates = analysis.extract_gate_params(net, x)
    report = analysis.param_report(gates, bins)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = x.shape[0]
    written = []
    for name, hist in report.histograms.items():
        written.append(analysis.export_analysis(hist, out / analysis.analysis_filename(f"hist-{name}", "gpn", steps)))
    for name, fit in report.fits.items():
        written.append(analysis.export_analysis(fit, out / analysis.analysis_filename(f"fit-{name}", "gpn", steps)))
    for name, trace in report.traces.items():
        written.append(analysis.export_analysis(trace, out / analysis.analysis_filename(f"trace-{name}", "gpn", steps)))
    for p in written:
        print(p)
    return report, written


def parse_raw_events(text: str, channels: int) -> list[SpikeEventSequence]:
    """Parse ``label;t,unit;t,unit;...`` lines into sequences."""
    seqs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields_ = line.split(";")
        try:
            label = int(fields_[0])
            times, units = [], []
            for item in fields_[1:]:
                if not item:
                    continue
                t, u = item.split(",")
                times.append(float(t))
                units.append(int(u))
            seqs.append(SpikeEventSequence(np.array(times), np.array(units, dtype=np.int64), label, channels))
        except (ValueError, FormatError) as err:
            raise DataError(f"line {lineno}: {err}") from None
    return seqs


def cmd_convert(raw_path: str, out_path: str, channels: int = 700) -> int:
    text = Path(raw_path).read_text(encoding="utf-8")
    seqs = parse_raw_events(text, channels)
    save_events(out_path, seqs, channels)
    print(f"wrote {len(seqs)} sequences to {out_path}")
    return len(seqs)


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML key-value file; flags override it")
    p.add_argument("--dataset", help="shd or ssc (selects file names and recipe defaults)")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--train-path", dest="train_path")
    p.add_argument("--val-path", dest="val_path")
    p.add_argument("--test-path", dest="test_path")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--arch")
    p.add_argument("--neuron", help="replace every spiking layer with this kind (gpn, lif, if, cuba, plif)")
    p.add_argument("--ablate", action="append", default=[], help="FI, T or B; repeatable")
    p.add_argument("--beta", type=float)
    p.add_argument("--vth", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-detach-reset", dest="detach_reset", action="store_const", const=False)
    p.add_argument("--T", dest="T", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss-mode", dest="loss_mode", choices=["all_step", "last_step"])
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--lr-patience", dest="lr_patience", type=int)
    p.add_argument("--early-stop", dest="early_stop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--augment", choices=["per_step", "per_sample", "none"])
    p.add_argument("--dropout", type=float)
    p.add_argument("--average", choices=["logits", "probs"])
    p.add_argument("--grid", action="store_const", const=True,
                   help="grid-search the fixed beta / v_th of ablated gates on validation accuracy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and save the best-validation checkpoint")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = sub.add_parser("grad-analysis", help="gradient mean/std per time step")
    _add_run_flags(p)
    p.add_argument("--T-list", dest="t_list", required=True, help="comma-separated, e.g. 20,40")
    p.add_argument("--target", choices=["spike_input", "raw"], default="spike_input")

    p = sub.add_parser("param-analysis", help="gate-parameter histograms, fits and traces")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=128)
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)

    p = sub.add_parser("convert", help="text event dump -> SPKE container")
    p.add_argument("raw")
    p.add_argument("out")
    p.add_argument("--channels", type=int, default=700)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "convert":
            cmd_convert(args.raw, args.out, args.channels)
            return EXIT_OK
        cfg = build_config(args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, cfg, args.split)
        elif args.command == "grad-analysis":
            try:
                steps = [int(t) for t in args.t_list.split(",") if t.strip()]
            except ValueError:
                raise ConfigError([f"bad --T-list {args.t_list!r}"]) from None
            cmd_grad_analysis(cfg, steps, args.target)
        elif args.command == "param-analysis":
            cmd_param_analysis(args.checkpoint, cfg, args.n_samples, args.bins)
    except ConfigError as err:
        for p in err.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, CheckpointError, FileNotFoundError, analysis.AnalysisError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        ck = getattr(err, "checkpoint", None)
        if ck is not None and cfg is not None:
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            ck.save(Path(cfg.out_dir) / "last_good.gpnw")
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
