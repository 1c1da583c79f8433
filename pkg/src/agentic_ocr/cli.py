"""Command-line entry point.

    agentic-ocr [--config run.yaml] <command> [options]

Commands: extract, evaluate, reward, curate, mine-negatives, pipeline.
Errors are reported as one JSON record on stderr and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from . import config as config_mod
from .agent import HttpModelClient, ScriptedModel
from .config import RunConfig
from .curation import (
    HttpVerifier,
    ScriptedVerifier,
    TrajectoryCandidate,
    export_sft,
    filter_trajectories,
    manifest,
    mine_negatives,
    uncertainty_filter,
)
from .errors import AgenticOcrError, ConfigInvalid, InputUnreadable
from .metrics import PageJudgment, evaluate_boxes, page_accuracy, report_record
from .pipeline import (
    HttpGeneratorClient,
    InputConfig,
    RetrievedPage,
    ScriptedGenerator,
    build_generator_input,
    expand_adjacent,
    extract,
    invoke_generator,
    load_image_file,
    run_record,
    select_top_k,
)
from .records import boxes, dumps, read_jsonl, write_jsonl
from .reward import score_rollout
from .toolkit import HttpOcrBackend, MockOcrBackend, OcrBackendDescriptor

logger = logging.getLogger("agentic_ocr")

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3


class CommandFailed(Exception):
    def __init__(self, record: dict):
        super().__init__(record.get("message", ""))
        self.record = record


def _emit(records, out: str | None) -> int:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        return write_jsonl(out, records)
    n = 0
    for record in records:
        sys.stdout.write(dumps(record) + "\n")
        n += 1
    return n


# -- client construction --------------------------------------------------

def make_model_client(cfg: RunConfig):
    if cfg.model.script:
        return ScriptedModel.from_file(cfg.model.script)
    if cfg.model.endpoint:
        return HttpModelClient(
            cfg.model.endpoint,
            model=cfg.model.name or "agentic-ocr",
            api_key=os.environ.get("MODEL_API_KEY"),
            timeout=cfg.model.timeout or 120.0,
        )
    raise ConfigInvalid("model.endpoint or model.script is required")


def make_backend(cfg: RunConfig):
    if cfg.backend.script:
        return MockOcrBackend.from_file(cfg.backend.script)
    if cfg.backend.endpoint:
        return HttpOcrBackend(OcrBackendDescriptor(cfg.backend.endpoint, timeout=cfg.backend.timeout or 30.0))
    return None


def make_generator(cfg: RunConfig):
    if cfg.generator.script:
        return ScriptedGenerator.from_file(cfg.generator.script)
    if cfg.generator.endpoint:
        return HttpGeneratorClient(
            cfg.generator.endpoint,
            model=cfg.generator.name or "generator",
            api_key=os.environ.get("GENERATOR_API_KEY"),
            timeout=cfg.generator.timeout or 300.0,
        )
    raise ConfigInvalid("generator.endpoint or generator.script is required")


# -- commands -------------------------------------------------------------

def _page_key(rec: dict, path: str, line: int) -> tuple[str, str]:
    try:
        return str(rec["query_id"]), str(rec["page_id"])
    except KeyError as exc:
        raise InputUnreadable(f"missing field {exc}", path=path, line=line) from None


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ann_path = args.annotations or cfg.paths.get("annotations")
    pred_path = args.predictions or cfg.paths.get("predictions")
    if not ann_path or not pred_path:
        raise ConfigInvalid("evaluate needs --annotations and --predictions")
    preds: dict[tuple[str, str], list] = {}
    for line, rec in read_jsonl(pred_path):
        key = _page_key(rec, pred_path, line)
        preds[key] = boxes(rec.get("pred_boxes"), path=pred_path, line=line, field="pred_boxes")
    records, judgments = [], []
    for line, rec in read_jsonl(ann_path):
        key = _page_key(rec, ann_path, line)
        gt = boxes(rec.get("gt_boxes"), path=ann_path, line=line, field="gt_boxes")
        pred = preds.get(key, [])
        label = rec.get("label", "positive" if gt else "negative")
        judgments.append(PageJudgment(expected_relevant=label == "positive", predicted_relevant=bool(pred)))
        if gt:
            records.append(report_record(key[0], key[1], evaluate_boxes(gt, pred, cfg.thresholds), cfg.thresholds))
    if judgments:
        summary = {"summary": True, "pages": len(judgments), "page_accuracy": page_accuracy(judgments)}
        if records:
            for k in ("recall_min", "recall_em", "precision_min", "f1_min"):
                # exact mean of the reported values, rounded once
                summary[f"mean_{k}"] = float(sum(Fraction(r[k]) for r in records) / len(records))
        records.append(summary)
    _emit(records, args.out)
    return 0


def cmd_reward(args, cfg: RunConfig) -> int:
    path = args.rollouts
    out = []
    for line, rec in read_jsonl(path):
        try:
            out.append(score_rollout(rec, cfg.reward))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputUnreadable(f"bad rollout record: {exc}", path=path, line=line) from exc
    _emit(out, args.out)
    return 0


def cmd_curate(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out or cfg.paths.get("output", "curated"))
    out_dir.mkdir(parents=True, exist_ok=True)
    candidates = []
    for line, rec in read_jsonl(args.trajectories):
        gt = boxes(rec.get("gt_boxes"), path=args.trajectories, line=line, field="gt_boxes")
        pred = boxes(rec.get("pred_boxes"), path=args.trajectories, line=line, field="pred_boxes")
        if not gt:
            raise InputUnreadable("positive trajectory without gt_boxes", path=args.trajectories, line=line)
        if "id" not in rec:
            raise InputUnreadable("missing field 'id'", path=args.trajectories, line=line)
        candidates.append(TrajectoryCandidate(rec["id"], rec.get("turns", []), pred, gt, thresholds=cfg.thresholds))
    kept = filter_trajectories(candidates, args.keep)
    negatives = [rec for _, rec in read_jsonl(args.negatives)] if args.negatives else []
    sft = [dict(export_sft(c), label="positive") for c in kept]
    for rec in negatives:
        sft.append({
            "id": rec["id"],
            "label": "negative",
            "messages": [
                {"role": t["role"], "content": t.get("text", ""), "image_parts": t.get("image_parts", []),
                 "trainable": t["role"] == "assistant"}
                for t in rec.get("turns", [])
            ],
        })
    write_jsonl(out_dir / "sft.jsonl", sft)
    mf = manifest(len(kept), len(negatives), target_negative_share=args.target_share, margin=args.margin)
    (out_dir / "manifest.json").write_text(json.dumps(mf.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.rollout_scores:
        scores = {}
        for _, rec in read_jsonl(args.rollout_scores):
            scores[rec["sample_id"]] = rec["scores"]
        kept_ids = uncertainty_filter(scores, args.std_floor, top_fraction=args.top_fraction)
        write_jsonl(out_dir / "curriculum.jsonl", [{"sample_id": s} for s in kept_ids])
    return 0


def cmd_mine_negatives(args, cfg: RunConfig) -> int:
    inputs = list(read_jsonl(args.input))
    if args.verdicts:
        verdicts = {(str(r["query_id"]), str(r["page"])): bool(r["verified_negative"]) for _, r in read_jsonl(args.verdicts)}
        verifier = ScriptedVerifier(verdicts)
    elif cfg.verifier.endpoint:
        verifier = HttpVerifier(cfg.verifier.endpoint, {str(r["query_id"]): r.get("query", "") for _, r in inputs})
    else:
        raise ConfigInvalid("mine-negatives needs --verdicts or verifier.endpoint")
    out = []
    for line, rec in inputs:
        try:
            found = mine_negatives(str(rec["query_id"]), rec.get("scored_pages", []), verifier)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, AgenticOcrError):
                raise
            raise InputUnreadable(f"bad scored page record: {exc}", path=args.input, line=line) from exc
        out.extend(n.to_dict() for n in found)
    _emit(out, args.out)
    return 0


def _load_queries(path: str) -> list[tuple[dict, list[RetrievedPage]]]:
    out = []
    for line, rec in read_jsonl(path):
        try:
            pages = [
                RetrievedPage(str(p["doc_id"]), int(p["page_index"]), float(p.get("score", 0.0)), str(p.get("image", "")))
                for p in rec["pages"]
            ]
            rec["query_id"], rec["query"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputUnreadable(f"bad query record: {exc}", path=path, line=line) from exc
        out.append((rec, pages))
    return out


def _image_loader(base: Path):
    # image refs stay relative to the queries file so bundles do not depend on the working directory
    def load(ref: str):
        return load_image_file(str(base / ref))

    return load


def _prepare_pages(rec: dict, pages: list[RetrievedPage], cfg: RunConfig) -> list[RetrievedPage]:
    pages = select_top_k(pages, cfg.top_k)
    if cfg.expand_adjacent:
        counts = rec.get("doc_page_counts") or {}
        image_pattern = rec.get("image_pattern")  # e.g. "pages/{doc_id}/{page_index}.png"

        def ref_for(doc_id: str, idx: int) -> str:
            return image_pattern.format(doc_id=doc_id, page_index=idx) if image_pattern else ""

        pages = expand_adjacent(pages, counts, ref_for)
    return pages


def _run_extract(args, cfg: RunConfig):
    queries_path = args.queries or cfg.paths.get("queries")
    if not queries_path:
        raise ConfigInvalid("--queries is required")
    out_dir = Path(args.out or cfg.paths.get("output", "bundles"))
    model = make_model_client(cfg)
    backend = make_backend(cfg)
    loader = _image_loader(Path(queries_path).parent)
    results = []
    for rec, pages in _load_queries(queries_path):
        pages = _prepare_pages(rec, pages, cfg)
        bundle = extract(str(rec["query_id"]), rec["query"], pages, cfg.session, cfg.fan_out, backend, model, loader)
        bundle.write(out_dir / str(rec["query_id"]))
        results.append((rec, pages, bundle))
    return out_dir, results, loader


def _failure_record(results) -> dict | None:
    failures = [dict(f, query_id=b.query_id) for _, _, b in results for f in b.failures]
    if not failures:
        return None
    return {"error": failures[0]["error"], "message": f"{len(failures)} page(s) failed", "failures": failures}


def cmd_extract(args, cfg: RunConfig) -> int:
    _, results, _ = _run_extract(args, cfg)
    failure = _failure_record(results)
    if failure:
        raise CommandFailed(failure)
    return 0


def cmd_pipeline(args, cfg: RunConfig) -> int:
    out_dir, results, loader = _run_extract(args, cfg)
    generator = make_generator(cfg)
    ocr_texts = None
    if args.page_ocr:
        ocr_texts = {str(r["page_id"]): r["text"] for _, r in read_jsonl(args.page_ocr)}
    configs = [InputConfig(c) for c in args.configs] if args.configs else list(cfg.input_configs)
    report = []
    for rec, pages, bundle in results:
        question = rec.get("question", rec["query"])
        for conf in configs:
            gen_input = build_generator_input(bundle, conf, ocr_texts, loader)
            result = invoke_generator(gen_input, question, generator)
            report.append(run_record(bundle.query_id, conf, result, pages, bundle, rec.get("gold_pages")))
    write_jsonl(out_dir / "run_report.jsonl", report)
    failure = _failure_record(results)
    if failure:
        raise CommandFailed(failure)
    return 0


# -- entry ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentic-ocr", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="run configuration (YAML or JSON)")
    parser.add_argument("--fan-out", type=int, help="override fan_out")
    parser.add_argument("--model-endpoint", help="override model.endpoint")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="box metrics and page accuracy from annotations + predictions")
    p.add_argument("--annotations")
    p.add_argument("--predictions")
    p.add_argument("--out", help="output JSONL (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reward", help="score a rollout file")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("curate", help="filter trajectories, export SFT data and a dataset manifest")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--keep", type=int, required=True)
    p.add_argument("--negatives")
    p.add_argument("--rollout-scores")
    p.add_argument("--std-floor", type=float, default=0.1)
    p.add_argument("--top-fraction", type=float)
    p.add_argument("--target-share", type=float, default=0.23)
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("mine-negatives", help="band-filter reranker scores and verify hard negatives")
    p.add_argument("--input", required=True)
    p.add_argument("--verdicts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mine_negatives)

    for name, func, help_ in (
        ("extract", cmd_extract, "run extraction sessions and write evidence bundles"),
        ("pipeline", cmd_pipeline, "extraction plus generator calls and a run report"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--queries")
        p.add_argument("--out")
        p.add_argument("--expand-adjacent", action="store_true", default=None)
        if name == "pipeline":
            p.add_argument("--page-ocr", help="JSONL of {page_id, text} full-page OCR")
            p.add_argument("--configs", nargs="+", choices=[c.value for c in InputConfig])
        p.set_defaults(func=func)
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.fan_out is not None:
        if args.fan_out < 1:
            raise ConfigInvalid("--fan-out must be at least 1")
        cfg = replace(cfg, fan_out=args.fan_out)
    if args.model_endpoint:
        cfg = replace(cfg, model=replace(cfg.model, endpoint=args.model_endpoint, script=None))
    if getattr(args, "expand_adjacent", None):
        cfg = replace(cfg, expand_adjacent=True)
    return cfg


def _error_record(exc: Exception) -> dict:
    record = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, InputUnreadable):
        record["file"] = exc.path
        record["line"] = exc.line
    return record


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(config_mod.load(args.config), args)
        return args.func(args, cfg)
    except CommandFailed as exc:
        sys.stderr.write(dumps(exc.record) + "\n")
        return EXIT_ERROR
    except ConfigInvalid as exc:
        sys.stderr.write(dumps(_error_record(exc)) + "\n")
        return EXIT_CONFIG
    except InputUnreadable as exc:
        sys.stderr.write(dumps(_error_record(exc)) + "\n")
        return EXIT_INPUT
    except AgenticOcrError as exc:
        sys.stderr.write(dumps(_error_record(exc)) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
