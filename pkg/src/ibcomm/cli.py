"""Command-line surface. All outputs are CSV (or JSON for decode) on
stdout or a ``--out`` path. An optional plain-text key=value config file
supplies defaults; explicit flags override file values.
"""

from __future__ import annotations

import csv
import io
import json
import sys

import click
import numpy as np

from . import codec, harness, model as mdl, sim
from .smg import QuantizedSparseMask


def _read_config(path):
    values = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config(ctx, params):
    """Fill parameters still at their defaults from the config file."""
    path = params.pop("config", None)
    if not path:
        return params
    filevals = _read_config(path)
    for name, value in filevals.items():
        if name not in params:
            raise click.BadParameter(f"unknown config key {name!r}")
        if ctx.get_parameter_source(name) == click.core.ParameterSource.DEFAULT:
            current = params[name]
            if isinstance(current, bool):
                params[name] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                params[name] = int(value)
            elif isinstance(current, float):
                params[name] = float(value)
            else:
                params[name] = value
    return params


def _write_csv(rows, fieldnames, out):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    if out:
        with open(out, "w") as f:
            f.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _train_options(fn):
    opts = [
        click.option("--config", type=click.Path(exists=True), default=None),
        click.option("--seed", type=int, default=0),
        click.option("--epochs", type=int, default=200),
        click.option("--lr", type=float, default=0.002),
        click.option("--beta", type=float, default=0.01),
        click.option("--alpha", type=float, default=0.1),
        click.option("--bits", type=int, default=4),
        click.option("--d", type=int, default=64),
        click.option("--c", type=int, default=16),
        click.option("--h", type=int, default=64),
        click.option("--w", type=int, default=64),
        click.option("--n-agents", type=int, default=2),
        click.option("--n-train-scenes", type=int, default=10),
        click.option("--n-eval-scenes", type=int, default=5),
        click.option("--threshold", type=float, default=0.5),
        click.option("--freeze-backbone", is_flag=True, default=False),
        click.option("--simple-encoder", is_flag=True, default=False),
        click.option("--simple-generator", is_flag=True, default=False),
        click.option("--no-ste", is_flag=True, default=False),
        click.option("--no-mask", is_flag=True, default=False),
        click.option("--single-scale-rec", is_flag=True, default=False),
        click.option("--out", type=click.Path(), default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _make_train_config(params, modes=None):
    kwargs = {k: params[k] for k in (
        "seed", "epochs", "lr", "beta", "alpha", "bits", "d", "c", "h", "w",
        "n_agents", "n_train_scenes", "n_eval_scenes", "threshold",
        "freeze_backbone", "simple_encoder", "simple_generator", "no_ste",
        "no_mask", "single_scale_rec")}
    if modes is not None:
        kwargs["modes"] = modes
    return harness.TrainConfig(**kwargs)


@click.group()
def main():
    """Bandwidth-efficient collaborative perception toolkit."""


@main.command()
@_train_options
@click.option("--modes", default="none,standard,infocom",
              help="comma-separated collaboration modes to train")
@click.option("--checkpoint", type=click.Path(), default=None,
              help="write trained parameters (one file per mode)")
@click.pass_context
def train(ctx, **params):
    """Train the configured modes and emit the evaluation CSV."""
    params = _apply_config(ctx, params)
    modes = tuple(m.strip() for m in params.pop("modes").split(","))
    checkpoint = params.pop("checkpoint")
    cfg = _make_train_config(params, modes)
    record, states = harness.train(cfg)
    if checkpoint:
        from .engine import save_checkpoint
        for mode, state in states.items():
            save_checkpoint(state, f"{checkpoint}.{mode}")
    rows = []
    for mode, rec in record.modes.items():
        for thr in (0.3, 0.5, 0.7):
            rows.append({"mode": mode, "iou_thr": thr, "ap": rec.aps[thr],
                         "mean_ap": rec.aps["mean"],
                         "scenes": cfg.n_train_scenes, "seed": cfg.seed})
    _write_csv(rows, ["mode", "iou_thr", "ap", "mean_ap", "scenes", "seed"],
               params["out"])


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(sim.MODES), default="infocom")
@click.option("--seed", type=int, default=0)
@click.option("--n-agents", type=int, default=2)
@click.option("--rate", type=float, default=0.4 * 1024 * 1024,
              help="link rate in bytes/second")
@click.option("--deadline", type=float, default=1.0)
@click.option("--loss-prob", type=float, default=0.0)
@click.option("--cycles", type=int, default=1)
@click.option("--c", type=int, default=16)
@click.option("--h", type=int, default=64)
@click.option("--w", type=int, default=64)
@click.option("--d", type=int, default=64)
@click.option("--alpha", type=float, default=0.1)
@click.option("--bits", type=int, default=4)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
def simulate(ctx, **params):
    """Run collaboration cycles; one CSV row per cycle."""
    params = _apply_config(ctx, params)
    mcfg = mdl.ModelConfig(c=params["c"], h=params["h"], w=params["w"],
                           d=params["d"], alpha=params["alpha"],
                           bits=params["bits"])
    model = mdl.build_model(mcfg, seed=params["seed"])
    if params["checkpoint"]:
        from .engine import load_checkpoint
        model.graph.load_state(load_checkpoint(params["checkpoint"]))
    link = sim.LinkModel(rate=params["rate"], deadline=params["deadline"],
                         loss_prob=params["loss_prob"])
    scfg = sim.SceneConfig(height=params["h"], width=params["w"],
                           n_agents=params["n_agents"])
    rng = np.random.default_rng(params["seed"])
    rows = []
    for i in range(params["cycles"]):
        scene = sim.generate_scene(params["seed"] + i, scfg)
        r = sim.run_cycle(params["mode"], scene, model, link, rng=rng)
        rows.append({
            "cycle": i, "mode": r.mode,
            "detections": sum(len(v) for v in r.detections.values()),
            "reported_bytes": r.reported_bytes, "wire_bytes": r.wire_bytes,
            "transmit_seconds": r.transmit_seconds,
            "compute_seconds": r.compute_seconds,
            "completed_within_deadline": r.completed_within_deadline,
            "dropped_pairs": len(r.dropped_pairs)})
    _write_csv(rows, list(rows[0].keys()), params["out"])


@main.command()
@_train_options
@click.option("--param", type=click.Choice(["alpha", "b", "beta"]),
              required=True)
@click.option("--values", required=True, help="comma-separated sweep values")
@click.pass_context
def sweep(ctx, **params):
    """Sweep alpha, b, or beta; one CSV row per value."""
    params = _apply_config(ctx, params)
    values = [float(v) for v in params.pop("values").split(",")]
    param = params.pop("param")
    if param == "b":
        values = [int(v) for v in values]
    cfg = _make_train_config(params)
    rows = harness.sweep(param, values, cfg)
    fields = ["param", "value", "mean_ap", "reported_bytes"]
    if param == "alpha":
        fields.append("k")
    if param == "b":
        fields.append("delta")
    _write_csv(rows, fields, params["out"])


@main.command()
@_train_options
@click.pass_context
def ablate(ctx, **params):
    """Train the six flag-built ablation variants."""
    params = _apply_config(ctx, params)
    cfg = _make_train_config(params)
    rows = harness.ablate(cfg)
    _write_csv(rows, ["variant", "mean_ap", "smg_update_norm"], params["out"])


@main.command()
@click.option("--out", type=click.Path(), default=None)
def volume(out):
    """Emit the published communication-volume table as CSV."""
    rows = harness.volume_table()
    _write_csv(rows, ["dataset_dims", "method", "bytes", "human_readable"], out)


@main.command()
@click.argument("unit_json", type=click.Path(exists=True))
@click.argument("frame_out", type=click.Path())
def encode(unit_json, frame_out):
    """Serialize a JSON-described message unit to a binary frame."""
    with open(unit_json) as f:
        spec = json.load(f)
    mq = QuantizedSparseMask(
        indices=np.asarray(spec["indices"], dtype=np.int64),
        codes=np.asarray(spec["codes"], dtype=np.int64),
        bit_width=int(spec["b"]), height=int(spec["h"]), width=int(spec["w"]))
    unit = codec.MessageUnit(
        agent_id=int(spec["agent_id"]), frame_id=int(spec["frame_id"]),
        e=np.asarray(spec["e"], dtype=np.float32), mq=mq,
        c=int(spec["c"]), h=int(spec["h"]), w=int(spec["w"]))
    with open(frame_out, "wb") as f:
        f.write(codec.encode_message(unit))


@main.command()
@click.argument("frame_in", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def decode(frame_in, out):
    """Parse a binary frame back to JSON."""
    with open(frame_in, "rb") as f:
        unit = codec.decode_message(f.read())
    doc = {"agent_id": unit.agent_id, "frame_id": unit.frame_id,
           "c": unit.c, "h": unit.h, "w": unit.w, "b": unit.mq.bit_width,
           "e": [float(v) for v in unit.e],
           "indices": [int(i) for i in unit.mq.indices],
           "codes": [int(c) for c in unit.mq.codes]}
    text = json.dumps(doc, indent=2)
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        click.echo(text)


@main.command()
@click.option("--h", type=int, required=True)
@click.option("--w", type=int, required=True)
@click.option("--k", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--bits", "-b", type=int, default=4)
def bound(h, w, k, alpha, bits):
    """Entropy upper bound (bits) of a k-of-HW sparse b-bit mask."""
    if k is None:
        if alpha is None:
            raise click.BadParameter("give either --k or --alpha")
        k = max(1, int(np.floor(alpha * h * w)))
    click.echo(f"{codec.entropy_bound(h, w, k, bits):.6f}")


if __name__ == "__main__":
    main()
