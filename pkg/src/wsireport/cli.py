"""Operator entry points.

Subcommands::

    wsireport run   --config C --manifest M --out DIR [--jobs N] [--seed S]
    wsireport eval  --pred DIR --refs FILE.jsonl --checklist FILE.json [--out DIR]
    wsireport trace FILE [--round N] [--field NAME] [--replay]

``run`` writes report.txt, report.json and trace.jsonl per slide under the
output directory. Exit codes: 0 ok, 1 partial failure, 2 config error,
3 manifest error, 4 eval id mismatch, 5 malformed trace.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import metrics, qc, trace as trace_mod
from .config import PipelineConfig, load_config
from .errors import ConfigError, MalformedTrace, WsiReportError
from .features import PatchImageSource, load_store
from .pipeline import qc_iterate

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_MANIFEST = 3
EXIT_ID_MISMATCH = 4
EXIT_BAD_TRACE = 5


@dataclass
class ManifestEntry:
    slide_id: str
    feature_path: Path
    patch_image_root: Path
    reference_report: str | None = None


def load_manifest(path: Path) -> list[ManifestEntry]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    slides = raw["slides"] if isinstance(raw, dict) else raw
    entries = []
    for item in slides:
        entries.append(
            ManifestEntry(
                slide_id=item["slide_id"],
                feature_path=Path(item["feature_path"]),
                patch_image_root=Path(item["patch_image_root"]),
                reference_report=item.get("reference_report"),
            )
        )
    ids = [e.slide_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest slide_ids must be unique")
    if not entries:
        raise ValueError("manifest lists no slides")
    return entries


def _run_one(config: PipelineConfig, entry: ManifestEntry, out_dir: Path) -> None:
    fmt = "jsonl" if entry.feature_path.suffix == ".jsonl" else "binary"
    store = load_store(entry.feature_path, fmt=fmt)
    if store.slide_id != entry.slide_id and fmt == "binary":
        store.slide_id = entry.slide_id  # manifest id wins over the file stem
    source = PatchImageSource(root=entry.patch_image_root)
    slide_dir = out_dir / entry.slide_id
    slide_dir.mkdir(parents=True, exist_ok=True)

    report, reason, run_trace = qc_iterate(config, store, source)
    run_trace.write_jsonl(slide_dir / "trace.jsonl")
    (slide_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8"
    )
    (slide_dir / "report.txt").write_text(qc.render_narrative(report), encoding="utf-8")
    (slide_dir / "result.json").write_text(
        json.dumps({"slide_id": entry.slide_id, "termination": reason.value}, indent=2),
        encoding="utf-8",
    )


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        entries = load_manifest(Path(args.manifest))
        for entry in entries:
            if not entry.feature_path.exists():
                raise FileNotFoundError(f"feature file missing: {entry.feature_path}")
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures: dict[str, str] = {}

    def run_entry(entry: ManifestEntry) -> None:
        try:
            _run_one(config, entry, out_dir)
        except (WsiReportError, OSError) as exc:
            failures[entry.slide_id] = str(exc)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(run_entry, entries))
    else:
        for entry in entries:
            run_entry(entry)

    for entry in entries:
        status = "FAIL" if entry.slide_id in failures else "ok"
        print(f"{entry.slide_id}: {status}")
    if failures:
        for slide_id, why in sorted(failures.items()):
            print(f"  {slide_id}: {why}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    try:
        checklist = qc.Checklist.from_file(args.checklist)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"config error: cannot load checklist: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    references: dict[str, str] = {}
    for line in Path(args.refs).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        references[row["slide_id"]] = row["reference"]

    slide_ids = sorted(
        p.parent.name for p in pred_dir.glob("*/report.txt")
    )
    if not slide_ids:
        print(f"no predictions (*/report.txt) under {pred_dir}", file=sys.stderr)
        return EXIT_ID_MISMATCH
    missing = [s for s in slide_ids if s not in references]
    if missing:
        print(f"no reference for slide(s): {', '.join(missing)}", file=sys.stderr)
        return EXIT_ID_MISMATCH

    embedder = metrics.default_token_embedder()
    rows = []
    pairs = []
    for slide_id in slide_ids:
        candidate = (pred_dir / slide_id / "report.txt").read_text(encoding="utf-8")
        pairs.append((candidate, references[slide_id]))
        rows.append(metrics.evaluate_pair(candidate, references[slide_id], checklist, embedder))
    report = metrics.evaluate_corpus(pairs, checklist, token_embedder=embedder)

    out_dir = Path(args.out) if args.out else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2), encoding="utf-8"
    )
    metrics.write_per_pair_csv(out_dir / "per_slide.csv", slide_ids, rows)

    print(f"{'metric':<22}{'mean':>10}")
    for key, value in report.to_dict().items():
        if key == "n_pairs":
            print(f"{key:<22}{value:>10d}")
        else:
            print(f"{key:<22}{value:>10.4f}")
    return EXIT_OK


def _format_assess(payload: dict) -> str:
    missing = ", ".join(payload.get("missing", [])) or "(none)"
    nmi = ", ".join(i["field"] for i in payload.get("need_more_info", [])) or "(none)"
    return f"missing: {missing}\n    need_more_info: {nmi}"


def cmd_trace(args) -> int:
    try:
        events = trace_mod.read_events(Path(args.trace_file))
    except MalformedTrace as exc:
        print(f"malformed trace: {exc}", file=sys.stderr)
        return EXIT_BAD_TRACE

    if args.replay:
        replayed = trace_mod.replay_final_report(events)
        report_path = Path(args.trace_file).parent / "report.json"
        if report_path.exists():
            on_disk = json.loads(report_path.read_text(encoding="utf-8"))
            if on_disk == replayed:
                print("replay: OK (matches report.json)")
                return EXIT_OK
            print("replay: MISMATCH against report.json", file=sys.stderr)
            return EXIT_BAD_TRACE
        print(json.dumps(replayed, indent=2, ensure_ascii=False))
        return EXIT_OK

    for event in events:
        if args.round is not None and event.round_index != args.round:
            continue
        payload = event.payload
        if args.field and not _event_touches_field(event, args.field):
            continue
        line = f"[round {event.round_index}] {event.type}"
        if event.type == "draft":
            print(f"{line}: {payload['text'][:80]}")
        elif event.type == "sample":
            print(f"{line}: {len(payload['indices'])} patches from {payload['k']} clusters")
        elif event.type == "describe":
            print(f"{line}: {payload['count']} descriptions")
        elif event.type == "assess":
            print(f"{line} ({payload.get('source')}):\n    {_format_assess(payload)}")
        elif event.type == "retrieve":
            hits = ", ".join(
                f"#{h['patch_index']}@({h['x']},{h['y']}) {h['score']:.3f}"
                for h in payload["hits"]
            )
            print(f"{line} [{payload['field']}]: {hits or '(pool exhausted)'}")
        elif event.type == "revise":
            conflicts = payload.get("conflicts", [])
            filled = sum(
                1 for e in payload["report"]["fields"].values() if e["status"] == "filled"
            )
            print(f"{line}: {filled} fields filled, {len(conflicts)} conflicts")
            for c in conflicts:
                print(
                    f"    conflict[{c['field']}]: kept {c['kept_source']} over "
                    f"{c['dropped_source']}"
                )
        elif event.type == "terminate":
            print(f"{line}: reason={payload['reason']}")
    return EXIT_OK


def _event_touches_field(event, field_name: str) -> bool:
    payload = event.payload
    if event.type == "assess":
        names = set(payload.get("missing", []))
        names |= {i["field"] for i in payload.get("need_more_info", [])}
        names |= {q["field"] for q in payload.get("queries", [])}
        return field_name in names
    if event.type == "retrieve":
        return payload.get("field") == field_name
    if event.type == "revise":
        return field_name in payload["report"]["fields"] and (
            payload["report"]["fields"][field_name]["status"] == "filled"
            or any(c["field"] == field_name for c in payload.get("conflicts", []))
        )
    return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsireport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline over a slide manifest")
    run.add_argument("--config", required=True)
    run.add_argument("--manifest", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--seed", type=int, default=None)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score generated reports against references")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--refs", required=True)
    ev.add_argument("--checklist", required=True)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    tr = sub.add_parser("trace", help="summarize or replay a run trace")
    tr.add_argument("trace_file")
    tr.add_argument("--round", type=int, default=None)
    tr.add_argument("--field", default=None)
    tr.add_argument("--replay", action="store_true")
    tr.set_defaults(func=cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
