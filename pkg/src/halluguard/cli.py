"""Command-line entry point.

Subcommands: score, eval, simulate-bound, tinylm {train,sample,rerank,dataset},
bundle {validate,inspect}.  Every command is deterministic given its inputs,
flags and seed; the seed is echoed as a comment line in CSV outputs.  Flag
parsing is strict: unknown flags or config keys abort with exit code 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import bound, bundle as bundle_io, detectors, metrics, spectral, tinylm

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SINGLE_CLASS = 3

NA = "NA"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def read_kv_config(path, allowed: set[str]) -> dict[str, str]:
    """Flat key=value file, UTF-8, '#' comments; unknown keys are fatal."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in allowed:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def _load_bundles(paths) -> list[bundle_io.TrajectoryBundle]:
    loaded = []
    for path in paths:
        try:
            loaded.append(bundle_io.read_bundle_file(path))
        except (OSError, bundle_io.BundleError) as exc:
            raise CliError(f"unreadable bundle {path}: {exc}")
    return loaded


def _detector_config(args, bundles) -> detectors.DetectorConfig:
    cfg = detectors.DetectorConfig(
        spectral=spectral.SpectralConfig(ridge=args.ridge, normalize=not args.no_normalize),
        link_threshold=args.link_threshold,
        clip=not args.no_clip,
        clip_quantile=args.clip_quantile,
        bank_capacity=args.bank_capacity,
    )
    if cfg.clip and bundles:
        thresholds = detectors.fit_clip_bank(
            bundles, capacity=cfg.bank_capacity, quantile=cfg.clip_quantile
        )
        cfg = replace(cfg, spectral=replace(cfg.spectral, clip_thresholds=thresholds))
    return cfg


def _format_float(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return NA
    return f"{x:.10g}"


def cmd_score(args) -> int:
    bundles = _load_bundles(args.bundles)
    names = args.detectors.split(",") if args.detectors else list(detectors.DETECTOR_NAMES)
    unknown = [n for n in names if n not in detectors.ORIENTATIONS]
    if unknown:
        raise CliError(f"unknown detectors: {unknown}")
    cfg = _detector_config(args, bundles)
    rows = []
    for b in sorted(bundles, key=lambda x: x.prompt_id):
        scores = detectors.score_sample(b, names, cfg)
        row = [b.prompt_id, "" if b.label is None else str(b.label)]
        row.append(_format_float(b.rouge_to_ref) if b.rouge_to_ref is not None else "")
        for name in names:
            value = scores.scores.get(name)
            row.append(NA if value is None else _format_float(value))
        rows.append(row)
    out = io.StringIO()
    out.write(f"# seed={args.seed}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["prompt_id", "label", "rouge_to_ref", *names])
    writer.writerows(rows)
    _write_text(args.out, out.getvalue())
    return EXIT_OK


def _write_text(path, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_score_csv(path) -> tuple[list[str], list[dict]]:
    """Returns (detector column names, rows with prompt_id/label/scores)."""
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise CliError(f"empty score csv {path}")
    if header[:3] != ["prompt_id", "label", "rouge_to_ref"]:
        raise CliError(f"{path}: missing prompt_id/label/rouge_to_ref columns")
    names = header[3:]
    rows = []
    for record in reader:
        scores = {}
        for name, cell in zip(names, record[3:]):
            scores[name] = None if cell == NA else float(cell)
        rows.append(
            {
                "prompt_id": record[0],
                "label": None if record[1] == "" else int(record[1]),
                "scores": scores,
            }
        )
    return names, rows


def cmd_eval(args) -> int:
    if args.scores:
        names, rows = read_score_csv(args.scores)
        if any(r["label"] is None for r in rows):
            raise CliError(f"{args.scores}: missing label for some rows")
        per_detector = {}
        labels = [r["label"] for r in rows]
        n_pos, n_neg = sum(labels), len(labels) - sum(labels)
        if n_pos == 0 or n_neg == 0:
            raise CliError(
                f"single-class dataset: n_pos={n_pos}, n_neg={n_neg}", EXIT_SINGLE_CLASS
            )
        for name in names:
            oriented = []
            for r in rows:
                value = r["scores"].get(name)
                if value is None:
                    continue
                if detectors.ORIENTATIONS.get(name) == detectors.LOWER_IS_HALLUCINATED:
                    value = -value
                oriented.append(metrics.LabeledScore(r["prompt_id"], value, r["label"]))
            if not oriented:
                continue
            try:
                threshold = metrics.select_threshold(
                    oriented, mode="quantile", pi_target=n_pos / len(labels)
                )
                per_detector[name] = metrics.DetectorReport(
                    auroc=metrics.auroc(oriented),
                    auprc=metrics.auprc(oriented),
                    f1_at_threshold=metrics.f1_at_threshold(oriented, threshold),
                    tpr_at_fpr={f: metrics.tpr_at_fpr(oriented, f) for f in metrics.FPR_POINTS},
                    threshold=threshold,
                    n_pos=sum(s.label for s in oriented),
                    n_neg=sum(1 - s.label for s in oriented),
                )
            except metrics.UndefinedMetricError as exc:
                raise CliError(str(exc), EXIT_SINGLE_CLASS)
        report = metrics.EvalReport(per_detector=per_detector)
    else:
        bundles = _load_bundles(args.bundles)
        names = args.detectors.split(",") if args.detectors else list(detectors.DETECTOR_NAMES)
        cfg = metrics.EvalConfig(detector=_detector_config(args, bundles), tau_r=args.tau_r)
        try:
            report = metrics.evaluate(bundles, names, cfg)
        except metrics.UndefinedMetricError as exc:
            raise CliError(str(exc), EXIT_SINGLE_CLASS)

    out = io.StringIO()
    out.write(f"# seed={args.seed}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        ["detector", "auroc", "auprc", "f1", "tpr_at_fpr_05", "tpr_at_fpr_10",
         "threshold", "n_pos", "n_neg"]
    )
    for name in sorted(report.per_detector):
        r = report.per_detector[name]
        writer.writerow(
            [name, _format_float(r.auroc), _format_float(r.auprc),
             _format_float(r.f1_at_threshold), _format_float(r.tpr_at_fpr[0.05]),
             _format_float(r.tpr_at_fpr[0.10]), _format_float(r.threshold),
             r.n_pos, r.n_neg]
        )
    _write_text(args.out, out.getvalue())
    if args.out not in (None, "-"):
        sys.stdout.write(render_report_table(report))
    return EXIT_OK


def render_report_table(report: metrics.EvalReport) -> str:
    headers = ["detector", "auroc", "auprc", "f1", "tpr@5%", "tpr@10%"]
    rows = [
        [name, f"{r.auroc:.4f}", f"{r.auprc:.4f}", f"{r.f1_at_threshold:.4f}",
         f"{r.tpr_at_fpr[0.05]:.4f}", f"{r.tpr_at_fpr[0.10]:.4f}"]
        for name, r in sorted(report.per_detector.items())
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


BOUND_KEYS = {f.name for f in bound.BoundParams.__dataclass_fields__.values()}


def cmd_simulate_bound(args) -> int:
    overrides = read_kv_config(args.params, BOUND_KEYS) if args.params else {}
    kwargs = {}
    for key, value in overrides.items():
        field_type = bound.BoundParams.__dataclass_fields__[key].type
        kwargs[key] = int(value) if field_type == "int" else float(value)
    try:
        params = bound.BoundParams(**kwargs)
        params.validate()
    except (bound.BoundParamError, ValueError) as exc:
        raise CliError(f"invalid bound parameters: {exc}")
    t_range = list(range(args.t_start, args.t_end + 1))
    empirical = bound.simulate_empirical_risk(params, args.noise_std, args.seed, t_range)
    out = io.StringIO()
    out.write(f"# seed={args.seed}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["T", "data_term", "reasoning_term", "bound", "empirical"])
    d = bound.data_term(params)
    for t, e in zip(t_range, empirical):
        r = bound.reasoning_term(params, t)
        writer.writerow(
            [t, _format_float(d), _format_float(r), _format_float(d + r), _format_float(e)]
        )
    _write_text(args.out, out.getvalue())
    return EXIT_OK


def cmd_bundle(args) -> int:
    if args.action == "validate":
        failures = 0
        for path in args.bundles:
            try:
                b = bundle_io.read_bundle_file(path)
            except (OSError, bundle_io.BundleError) as exc:
                print(f"{path}: ERROR {exc}")
                failures += 1
                continue
            report = bundle_io.validate_bundle(b)
            if report.ok:
                print(f"{path}: ok (K={b.k}, d={b.embed_dim})")
            else:
                failures += 1
                for violation in report.violations:
                    print(f"{path}: violation: {violation}")
        return EXIT_OK if failures == 0 else EXIT_INPUT
    # inspect
    for path in args.bundles:
        b = bundle_io.read_bundle_file(path)
        print(f"{path}:")
        print(f"  prompt_id={b.prompt_id!r} K={b.k} d={b.embed_dim}")
        print(f"  label={b.label} rouge_to_ref={b.rouge_to_ref}")
        print(f"  references={len(b.references)} meta={b.meta}")
        for i, g in enumerate(b.generations):
            states = "yes" if g.step_states is not None else "no"
            print(f"  gen {i}: T={len(g.tokens)} states={states} text={g.text!r}")
    return EXIT_OK


def cmd_tinylm(args) -> int:
    if args.action == "train":
        corpus = Path(args.corpus).read_text(encoding="utf-8").splitlines(keepends=True)
        # vocab_size is inferred from the corpus; 1 is a placeholder.
        config = tinylm.TinyLMConfig(
            vocab_size=1,
            d_model=args.d_model,
            n_layers=args.n_layers,
            n_heads=args.n_heads,
            context_len=args.context_len,
            seed=args.seed,
        )
        model, losses = tinylm.train_tiny_lm(
            corpus, config, steps=args.steps, lr=args.lr, batch_size=args.batch_size
        )
        tinylm.save_checkpoint(model, args.out)
        print(f"# seed={args.seed}")
        print(f"trained {args.steps} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        print(f"checkpoint written to {args.out}")
        return EXIT_OK

    model = tinylm.load_checkpoint(args.model)
    decode = tinylm.DecodeConfig(
        temperature=args.temperature,
        top_p=args.top_p,
        top_k=args.top_k,
        k_samples=args.k,
        max_steps=args.max_steps,
        seed=args.seed,
        greedy=args.greedy,
    )
    if args.action == "sample":
        prompt = args.prompt
        b = tinylm.sample_k(model, model.vocab.encode(prompt), decode, prompt_text=prompt)
        bundle_io.write_bundle_file(b, args.out)
        print(f"# seed={args.seed}")
        print(f"bundle written to {args.out}")
        return EXIT_OK
    if args.action == "rerank":
        scorer = None if args.weight == 0 else tinylm.make_beam_scorer(model, args.detector)
        tokens = tinylm.guided_beam_search(
            model,
            model.vocab.encode(args.prompt),
            scorer=scorer,
            beam=args.beam,
            rerank_every=args.rerank_every,
            weight=args.weight,
            max_steps=args.max_steps,
            seed=args.seed,
        )
        print(f"# seed={args.seed}")
        print(model.vocab.decode(tokens).rstrip("\n"))
        return EXIT_OK
    if args.action == "dataset":
        pairs = tinylm.make_addition_prompts(args.n_prompts, seed=args.seed)
        bundles = tinylm.make_labeled_dataset(
            model, pairs, decode, corruption=args.corruption, rho=args.rho, seed=args.seed
        )
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for b in bundles:
            bundle_io.write_bundle_file(b, out_dir / f"{b.prompt_id}.hgb")
        rate = tinylm.hallucination_rate(bundles)
        print(f"# seed={args.seed}")
        print(f"wrote {len(bundles)} bundles to {out_dir} (hallucination rate {rate:.3f})")
        return EXIT_OK
    raise CliError(f"unknown tinylm action {args.action!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="halluguard", formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser(
        "score", help="score bundles with detectors, emit CSV",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_score.add_argument("bundles", nargs="+")
    p_score.add_argument("--out", default="-")
    p_score.add_argument("--detectors", default=None, help="comma-separated detector names")
    _add_detector_flags(p_score)
    p_score.add_argument("--seed", type=int, default=0)
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser(
        "eval", help="compute AUROC/AUPRC/F1/TPR@FPR per detector",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_eval.add_argument("bundles", nargs="*")
    p_eval.add_argument("--scores", default=None, help="score CSV instead of bundles")
    p_eval.add_argument("--out", default="-")
    p_eval.add_argument("--detectors", default=None)
    p_eval.add_argument("--tau-r", type=float, default=0.5, help="ROUGE labeling threshold")
    _add_detector_flags(p_eval)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_sim = sub.add_parser(
        "simulate-bound", help="risk bound trajectory CSV",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p_sim.add_argument("--params", default=None, help="key=value parameter file")
    p_sim.add_argument("--t-start", type=int, default=0)
    p_sim.add_argument("--t-end", type=int, default=24)
    p_sim.add_argument("--noise-std", type=float, default=0.05)
    p_sim.add_argument("--out", default="-")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.set_defaults(func=cmd_simulate_bound)

    p_bundle = sub.add_parser("bundle", help="validate or inspect bundle files")
    p_bundle.add_argument("action", choices=["validate", "inspect"])
    p_bundle.add_argument("bundles", nargs="+")
    p_bundle.set_defaults(func=cmd_bundle)

    p_lm = sub.add_parser("tinylm", help="train/sample/rerank/dataset with the tiny LM")
    lm_sub = p_lm.add_subparsers(dest="action", required=True)

    p_train = lm_sub.add_parser(
        "train", formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--d-model", type=int, default=64)
    p_train.add_argument("--n-layers", type=int, default=2)
    p_train.add_argument("--n-heads", type=int, default=2)
    p_train.add_argument("--context-len", type=int, default=64)
    p_train.add_argument("--steps", type=int, default=2000)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.set_defaults(func=cmd_tinylm)

    for action in ("sample", "rerank", "dataset"):
        p_act = lm_sub.add_parser(
            action, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        p_act.add_argument("--model", required=True, help="checkpoint path")
        p_act.add_argument("--temperature", type=float, default=0.5, help="sampling temperature")
        p_act.add_argument("--top-p", type=float, default=0.95, help="nucleus mass")
        p_act.add_argument("--top-k", type=int, default=10, help="candidate cutoff")
        p_act.add_argument("--k", type=int, default=10, help="samples per prompt")
        p_act.add_argument("--max-steps", type=int, default=16, help="decode horizon")
        p_act.add_argument("--greedy", action="store_true", help="argmax decoding")
        p_act.add_argument("--seed", type=int, default=0, help="root seed")
        if action == "sample":
            p_act.add_argument("--prompt", required=True)
            p_act.add_argument("--out", required=True)
        elif action == "rerank":
            p_act.add_argument("--prompt", required=True)
            p_act.add_argument("--beam", type=int, default=10, help="beam width")
            p_act.add_argument("--rerank-every", type=int, default=1, help="rerank period")
            p_act.add_argument("--weight", type=float, default=0.5, help="detector blend weight")
            p_act.add_argument("--detector", default="halluguard", help="rerank detector")
        else:
            p_act.add_argument("--out", required=True)
            p_act.add_argument("--n-prompts", type=int, default=100)
            p_act.add_argument("--corruption", default="none",
                               choices=["none", "high-temp", "state-noise"])
            p_act.add_argument("--rho", type=float, default=1.0)
        p_act.set_defaults(func=cmd_tinylm)

    return parser


def _add_detector_flags(parser) -> None:
    parser.add_argument("--ridge", type=float, default=1e-3, help="Gram ridge")
    parser.add_argument("--no-normalize", action="store_true", help="skip row normalization")
    parser.add_argument("--no-clip", action="store_true", help="disable feature clipping")
    parser.add_argument("--clip-quantile", type=float, default=0.002, help="clip band quantile")
    parser.add_argument("--bank-capacity", type=int, default=3000, help="clipping bank size")
    parser.add_argument("--link-threshold", type=float, default=0.9, help="cosine linkage cut")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
