"""Command-line entry point.

Machine-readable results go to stdout as JSON (or JSON lines), human
diagnostics to stderr. Every run writes a flat key=value manifest of its
parameters and seeds into --outdir, and identical manifests reproduce
identical primary outputs byte for byte.

Exit codes: 0 success, 1 domain error (bad file, invalid tensor, failed
dialog), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from ambimap import aggregate as agg
from ambimap import dialog as dlg
from ambimap import metrics as met
from ambimap import probe as prb
from ambimap import synthdata as syn
from ambimap import tensorio
from ambimap import viz
from ambimap.decoder import DecoderConfig, ToyDecoder, make_sequence


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _diag(message: str) -> None:
    print(message, file=sys.stderr)


def write_manifest(outdir: str, subcommand: str, params: dict) -> Path:
    path = Path(outdir) / f"{subcommand}.manifest"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"subcommand={subcommand}"]
    for key in sorted(params):
        lines.append(f"{key}={params[key]}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _manifest_params(args: argparse.Namespace) -> dict:
    skip = {"func", "subcommand"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _decoder_config(args) -> DecoderConfig:
    return DecoderConfig(
        num_layers=args.num_layers,
        num_heads=args.num_heads,
        num_kv_heads=args.num_kv_heads,
        model_dim=args.model_dim,
        vocab_size=args.vocab_size,
        grid_side=args.grid_side,
        seed=args.seed,
    )


def _add_decoder_flags(p: argparse.ArgumentParser, grid_default: int = 8) -> None:
    p.add_argument("--num-layers", type=int, default=4)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--num-kv-heads", type=int, default=2)
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--grid-side", type=int, default=grid_default)


def cmd_gen_data(args) -> int:
    if args.kind == "maps":
        dataset = syn.gen_map_dataset(args.n, args.grid_side, args.seed, noise=args.noise)
        syn.save_map_dataset(dataset, args.out)
        _emit({"kind": "maps", "n": len(dataset), "out": args.out})
    elif args.kind == "scenes":
        scenes = syn.gen_scene_dataset(args.n, args.seed)
        with open(args.out, "w") as f:
            count = syn.save_scene_dataset(scenes, f)
        _emit({"kind": "scenes", "n": count, "out": args.out})
    else:
        records = syn.gen_dialog_dataset(args.n, args.seed)
        with open(args.out, "w") as f:
            count = dlg.write_corpus(records, f)
        _emit({"kind": "dialogs", "n": count, "out": args.out})
    return 0


def cmd_gen_attn(args) -> int:
    cfg = _decoder_config(args)
    text = args.text
    if not text.startswith("<image>"):
        text = "<image>clarify " + text
    seq, meta = make_sequence(cfg, text)
    tensor = ToyDecoder(cfg).attention(seq, args.read_layer)
    with open(args.out, "wb") as f:
        written = tensorio.write_tensor(tensor, meta, f)
    _emit(
        {
            "out": args.out,
            "bytes": written,
            "heads": tensor.num_heads,
            "queries": tensor.num_queries,
            "keys": tensor.num_keys,
            "image_tokens": tensor.num_image_tokens,
            "layer": tensor.layer_index,
        }
    )
    return 0


def _grid_side_of(tensor: tensorio.AttentionTensor) -> int:
    g = math.isqrt(tensor.num_image_tokens)
    if g * g != tensor.num_image_tokens:
        raise ValueError(
            f"num_image_tokens {tensor.num_image_tokens} is not a square grid"
        )
    return g


def cmd_aggregate(args) -> int:
    with open(args.tensor, "rb") as f:
        tensor, meta = tensorio.read_tensor(f)
    grid = _grid_side_of(tensor)
    amap, trace = agg.extract_map(tensor, meta, grid, epsilon=args.epsilon)
    with open(args.out, "wb") as f:
        agg.write_map(amap, f)
    if args.ascii:
        _diag(viz.ascii_render(amap))
    if args.fig:
        viz.save_map_figure(amap, args.fig, title=f"layer {amap.source_layer}")
    _emit(
        {
            "out": args.out,
            "grid_side": grid,
            "source_layer": amap.source_layer,
            "content_queries": len(trace.content_query_indices),
            "pooled_sum": float(trace.pooled.sum()),
        }
    )
    return 0


def cmd_train_probe(args) -> int:
    dataset = syn.load_map_dataset(args.data)
    cfg = prb.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    params, history = prb.train(dataset, cfg)
    with open(args.out, "wb") as f:
        prb.save_params(params, f)
    history_path = args.history or (args.out + ".history.csv")
    with open(history_path, "w") as f:
        f.write("epoch,train_loss,val_f1\n")
        for h in history:
            f.write(f"{h['epoch']},{h['train_loss']:.6f},{h.get('val_f1', '')}\n")
    if args.fig:
        viz.save_history_figure(history, args.fig)
    last = history[-1]
    _emit(
        {
            "out": args.out,
            "history": history_path,
            "epochs": len(history),
            "final_train_loss": last["train_loss"],
            "final_val_f1": last.get("val_f1"),
        }
    )
    return 0


def cmd_detect(args) -> int:
    with open(args.params, "rb") as f:
        params = prb.load_params(f)
    if args.map:
        with open(args.map, "rb") as f:
            amap = agg.read_map(f)
    else:
        with open(args.tensor, "rb") as f:
            tensor, meta = tensorio.read_tensor(f)
        amap, _ = agg.extract_map(tensor, meta, _grid_side_of(tensor))
    decision, p_amb = prb.predict(params, amap, threshold=args.threshold)
    peaks = prb.localize_peaks(
        amap, min_separation=args.min_separation, min_height=args.min_height
    )
    if args.fig:
        viz.save_map_figure(amap, args.fig, peaks=peaks, title="ambiguity map")
    _emit(
        {
            "p_amb": p_amb,
            "decision": "ambiguous" if decision else "unambiguous",
            "peaks": [[r, c] for r, c in peaks],
        }
    )
    return 0


def cmd_dialog(args) -> int:
    with open(args.script) as f:
        generator = dlg.ScriptedGenerator([line.rstrip("\n") for line in f])
    if args.interactive:
        oracle = dlg.StdinOracle(
            prompt_sink=lambda q: _diag(f"robot: {q}"),
            line_source=sys.stdin.readline,
        )
    else:
        with open(args.oracle) as f:
            oracle = dlg.ScriptedOracle([line.rstrip("\n") for line in f])
    state, box = dlg.run_dialog(generator, oracle, args.request, k_max=args.k_max)
    _emit(
        {
            "request": state.user_request,
            "turns": [[q, a] for q, a in state.turns],
            "box": [box.y_min, box.x_min, box.y_max, box.x_max],
        }
    )
    return 0


def cmd_linearize(args) -> int:
    with open(args.corpus) as f:
        records = dlg.read_corpus(f)
    lines = []
    for r in records:
        for pair in dlg.linearize_dialog(r.user_request, r.turns, r.gold_box):
            lines.append(
                json.dumps(
                    {
                        "image_id": r.image_id,
                        "prefix": pair.prefix,
                        "target": pair.target,
                        "is_grounding": pair.is_grounding,
                    },
                    sort_keys=True,
                )
            )
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        _emit({"pairs": len(lines), "records": len(records), "out": args.out})
    else:
        for line in lines:
            print(line)
    return 0


def cmd_eval_guesser(args) -> int:
    with open(args.corpus) as f:
        records = dlg.read_corpus(f)
    pairs = [
        (dlg.HEADER + dlg.linearize_context(r.user_request, r.turns), r.gold_box)
        for r in records
    ]
    if args.echo_gold:
        generator = dlg.GoldEchoGenerator([gold for _, gold in pairs])
    else:
        with open(args.predictions) as f:
            generator = dlg.ScriptedGenerator([line.rstrip("\n") for line in f])
    acc = dlg.evaluate_guesser(pairs, generator, iou_threshold=args.iou_threshold)
    _emit({"acc_at_iou": acc, "iou_threshold": args.iou_threshold, "n": len(pairs)})
    return 0


def cmd_sweep_layers(args) -> int:
    layers = [int(x) for x in args.layers.split(",") if x != ""]
    scenes = syn.gen_scene_dataset(args.n_scenes, args.seed)
    data = [(s.instruction, s.label) for s in scenes]
    cfg = met.SweepConfig(
        decoder=_decoder_config(args),
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    result = met.layer_sweep(layers, data, cfg)
    _diag(f"{'layer':>5}  {'f1':>8}  {'accuracy':>8}")
    for layer, f1, acc in result.rows:
        _diag(f"{layer:>5}  {f1:>8.4f}  {acc:>8.4f}")
    _diag(
        "full-scale reference (26-layer backbone, real images): "
        f"mid-depth peak F1 {met.FULL_SCALE_REFERENCE['layer_sweep_peak_f1']}, "
        f"last layer {met.FULL_SCALE_REFERENCE['layer_sweep_last_f1']}"
    )
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("layer,f1,accuracy\n")
            for layer, f1, acc in result.rows:
                f.write(f"{layer},{f1:.6f},{acc:.6f}\n")
    if args.fig:
        viz.save_sweep_figure(result, args.fig)
    for layer, f1, acc in result.rows:
        print(json.dumps({"layer": layer, "f1": f1, "accuracy": acc}, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    with open(args.tensor, "rb") as f:
        tensor, _ = tensorio.read_tensor(f)
    report = tensorio.validate_tensor(tensor, softmax_rows=args.softmax_rows)
    _emit({"valid": report.ok, "violations": report.violations})
    return 0 if report.ok else 1


def cmd_inspect(args) -> int:
    with open(args.tensor, "rb") as f:
        tensor, meta = tensorio.read_tensor(f)
    values = np.asarray(tensor.values, dtype=np.float64)
    roles: dict[str, int] = {}
    for r in meta.query_roles:
        roles[r] = roles.get(r, 0) + 1
    _emit(
        {
            "layer": tensor.layer_index,
            "heads": tensor.num_heads,
            "queries": tensor.num_queries,
            "keys": tensor.num_keys,
            "image_tokens": tensor.num_image_tokens,
            "value_min": float(values.min()),
            "value_max": float(values.max()),
            "row_sum_min": float(values.sum(axis=2).min()),
            "row_sum_max": float(values.sum(axis=2).max()),
            "roles": roles,
            "strings": meta.text_strings,
        }
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ambimap",
        description="attention-map ambiguity toolkit",
    )
    parser.add_argument("--outdir", default=".", help="directory for run manifests")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate labeled synthetic datasets")
    p.add_argument("--kind", choices=["maps", "scenes", "dialogs"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-side", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-attn", help="toy-decoder attention to a CAT1 file")
    p.add_argument("--text", required=True)
    p.add_argument("--read-layer", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    _add_decoder_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_attn)

    p = sub.add_parser("aggregate", help="CAT1 tensor to an ambiguity map")
    p.add_argument("--tensor", required=True)
    p.add_argument("--epsilon", type=float, default=agg.DEFAULT_EPSILON)
    p.add_argument("--ascii", action="store_true", help="text-art map on stderr")
    p.add_argument("--fig", help="also render a heatmap figure")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train-probe", help="train the CNN probe on a map dataset")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--history", help="per-epoch CSV (default <out>.history.csv)")
    p.add_argument("--fig", help="also render loss/F1 curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_probe)

    p = sub.add_parser("detect", help="score a map (or tensor) for ambiguity")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--map", help="AMF1 map file")
    src.add_argument("--tensor", help="CAT1 tensor file, aggregated on the fly")
    p.add_argument("--params", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-separation", type=int, default=3)
    p.add_argument("--min-height", type=float, default=0.5)
    p.add_argument("--fig", help="render the map with detected peaks")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("dialog", help="run the grounding dialog loop")
    p.add_argument("--request", required=True)
    p.add_argument("--script", required=True, help="scripted generator outputs, one per line")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--interactive", action="store_true", help="read replies from stdin")
    mode.add_argument("--oracle", help="scripted replies, one per line")
    p.add_argument("--k-max", type=int, default=dlg.DEFAULT_K_MAX)
    p.set_defaults(func=cmd_dialog)

    p = sub.add_parser("linearize", help="dialog corpus to supervision pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("eval-guesser", help="Acc@IoU over full-history prefixes")
    p.add_argument("--corpus", required=True)
    gen = p.add_mutually_exclusive_group(required=True)
    gen.add_argument("--echo-gold", action="store_true")
    gen.add_argument("--predictions", help="generated outputs, one line per record")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval_guesser)

    p = sub.add_parser("sweep-layers", help="train one probe per decoder layer")
    p.add_argument("--layers", required=True, help="comma-separated layer indices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=60)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    _add_decoder_flags(p)
    p.add_argument("--csv", help="per-layer scores as CSV")
    p.add_argument("--fig", help="per-layer score curves")
    p.set_defaults(func=cmd_sweep_layers)

    p = sub.add_parser("validate", help="check a CAT1 file's invariants")
    p.add_argument("--tensor", required=True)
    p.add_argument("--softmax-rows", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("inspect", help="header and stats of a CAT1 file")
    p.add_argument("--tensor", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        write_manifest(args.outdir, args.subcommand, _manifest_params(args))
        return args.func(args)
    except (
        ValueError,
        OSError,
        RuntimeError,
    ) as exc:
        _diag(f"error: {exc}")
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
