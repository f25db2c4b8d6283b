"""Command-line entry point.

    agentkernel rollout   --items F --out T.jsonl [--policy URL|script:FILE] [--group-size G]
    agentkernel objective --batch T.jsonl --out R.json [--algo bn-gspo|gspo|grpo] [--minibatch-groups N]
    agentkernel eval      --items F --workflow agentic|direct|rag --metric pass1|avg@k [--k N] --out R.json
    agentkernel classify  --items F --k 8 --out labels.jsonl
    agentkernel filter    --pool F --k 8 --max-correct 1 --out kept.jsonl
    agentkernel cache-prefetch --items F --out-cache DIR [--queries Q]
    agentkernel histogram --trajectories NAME=T.jsonl ... --out H.json
    agentkernel validate-config --config C.yaml

Every command takes ``--config`` (``--tools`` is an alias) and repeatable
``--set key=value`` overrides. Outputs are never overwritten without ``--force``.

Exit codes: 0 success, 2 configuration or input error, 3 infrastructure
failure, 4 assertion failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import ConfigError, KernelConfig, load_config
from .evalbench import (
    PASS_AT_K,
    ConfigurationError,
    MetricSpec,
    check_cache_coverage,
    difficulty_from_outcomes,
    make_agent_runner,
    run_benchmark,
    tool_usage_histogram,
)
from .items import ItemFileError, load_items
from .manifest import RunManifest, file_hash
from .optimizer import OBJECTIVES, OptimizerError, assemble_groups
from .reward import ScorerConfig, score_trajectory
from .rollout import HttpPolicyClient, ScriptedPolicy, TrajectoryStore, read_jsonl, run_group
from .schemas import WORKFLOW_TOOLS
from .toolbox import (
    CachedImageBackend,
    CachedTextBackend,
    ChatSummarizer,
    IdentitySummarizer,
    LiveImageBackend,
    LiveTextBackend,
    LocalCorpusBackend,
    ToolCache,
    Toolbox,
    cache_key,
    image_search_key,
    store_image_results,
    store_text_results,
)
from .toolbox.errors import InfrastructureError
from .toolbox.http import ChatClient
from .transcript import WORKFLOWS

log = logging.getLogger("agentkernel")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_INFRA, EXIT_ASSERT = 0, 1, 2, 3, 4


class OutputExists(ConfigurationError):
    pass


# --------------------------------------------------------------------------- wiring


def _parse_sets(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError([f"--set {pair!r}: expected key=value"])
        out[key.strip()] = yaml.safe_load(value)
    return out


def _config(args, needs_tools: bool = True, **overrides) -> KernelConfig:
    merged = _parse_sets(args.set)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return load_config(args.config, merged, needs_tools=needs_tools)


def _guard_output(path: str | Path, force: bool) -> Path:
    path = Path(path)
    if path.exists():
        if not force:
            raise OutputExists(f"{path} exists; pass --force to overwrite")
        path.unlink()
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def build_toolbox(cfg: KernelConfig) -> Toolbox:
    t, ep = cfg.tools, cfg.endpoints
    cache = ToolCache(cfg.resolve(t.cache_dir)) if t.cache_dir else None
    if t.text_backend == "cached":
        text_backend = CachedTextBackend(cache) if cache else None
    elif t.text_backend == "local":
        text_backend = LocalCorpusBackend(cfg.resolve(t.corpus_dir))
    else:
        text_backend = LiveTextBackend(ep.text_search, timeout=t.timeout)
    if t.offline or not ep.image_search:
        image_backend = CachedImageBackend(cache) if cache else None
    else:
        image_backend = LiveImageBackend(ep.image_search, timeout=t.timeout)
    summarizer = ChatSummarizer(ChatClient(ep.summarizer, t.timeout)) if ep.summarizer else IdentitySummarizer()
    return Toolbox(WORKFLOW_TOOLS["agentic"], text_backend=text_backend, summarizer=summarizer,
                   image_backend=image_backend, include_thumbnails=t.include_thumbnails,
                   max_observation_chars=t.max_observation_chars)


def build_policy(spec: str | None, cfg: KernelConfig):
    spec = spec or cfg.endpoints.policy
    if not spec:
        raise ConfigError(["no policy: pass --policy URL|script:FILE or set endpoints.policy"])
    if spec.startswith("script:"):
        path = Path(spec[len("script:"):])
        if not path.is_file():
            raise ConfigError([f"--policy: script file {path} not found"])
        return ScriptedPolicy.from_file(path), {"policy_script": file_hash(path)}
    if not spec.startswith(("http://", "https://")):
        raise ConfigError([f"--policy: expected an http(s) URL or script:FILE, got {spec!r}"])
    return HttpPolicyClient(spec, timeout=max(cfg.tools.timeout, 600.0)), {"policy_url": spec}


def build_scorer(mode: str, cfg: KernelConfig) -> ScorerConfig:
    if mode == "judge":
        if not cfg.endpoints.judge:
            raise ConfigError(["judge scoring needs endpoints.judge"])
        return ScorerConfig("judge", ChatClient(cfg.endpoints.judge, cfg.tools.timeout))
    return ScorerConfig("exact_match")


def _manifest(args, cfg: KernelConfig, command: str, inputs: dict, parameters: dict) -> RunManifest:
    hashed = {}
    for name, path in inputs.items():
        if path is not None:
            hashed[name] = file_hash(path) if Path(path).is_file() else str(path)
    if args.config:
        hashed["config_file"] = file_hash(args.config)
    return RunManifest(command, cfg.snapshot_hash(), hashed, parameters, argv=list(sys.argv[1:]))


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _outcomes_file(path: str | None) -> dict[str, list[bool]] | None:
    """``{item_id: [bool] * k}`` as JSON, for replaying precomputed correctness."""
    if path is None:
        return None
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object mapping item ids to outcome lists")
    return {str(k): [bool(x) for x in v] for k, v in data.items()}


def _outcome_runner(args, cfg: KernelConfig, k: int):
    table = _outcomes_file(args.outcomes)
    if table is not None:
        def replay(item, k_):
            if item.id not in table:
                raise ConfigurationError(f"outcome file has no row for item {item.id!r}")
            row = table[item.id]
            if len(row) != k_:
                raise ConfigurationError(f"item {item.id!r}: {len(row)} outcomes, expected {k_}")
            return row
        return replay, {"outcomes": file_hash(args.outcomes)}
    policy, policy_inputs = build_policy(args.policy, cfg)
    tools = build_toolbox(cfg)
    return make_agent_runner(policy, tools, build_scorer(cfg.scorer, cfg), cfg.limits, cfg.temperature), policy_inputs


# --------------------------------------------------------------------------- commands


def cmd_rollout(args) -> int:
    cfg = _config(args, group_size=args.group_size, seed=args.seed)
    items = load_items(args.items)
    policy, policy_inputs = build_policy(args.policy, cfg)
    tools = build_toolbox(cfg).restricted(WORKFLOW_TOOLS[cfg.workflow])
    if cfg.tools.offline and cfg.workflow != "direct":
        check_cache_coverage(items, tools)
    scorer = build_scorer(cfg.scorer, cfg)
    out = _guard_output(args.out, args.force)
    store = TrajectoryStore(out)
    failures = {}
    for item in items:
        group = run_group(item, policy, tools, cfg.limits, cfg.group_size, cfg.seed, workflow=cfg.workflow,
                          temperature=cfg.temperature, max_workers=args.workers)
        for traj in group.members:
            score_trajectory(traj, scorer)
            store.append(traj)
        if group.failures:
            failures[item.id] = {str(s): msg for s, msg in group.failures.items()}
    manifest = _manifest(args, cfg, "rollout", {"items": args.items, **policy_inputs},
                         {"group_size": cfg.group_size, "workflow": cfg.workflow})
    manifest.outputs = [str(out)]
    if failures:
        manifest.parameters = {**manifest.parameters, "failures": failures}
    manifest.write(out)
    print(f"wrote {sum(1 for _ in read_jsonl(out))} trajectories to {out}")
    if failures:
        log.error("infrastructure failures in %d item(s): %s", len(failures), ", ".join(failures))
        return EXIT_INFRA
    return EXIT_OK


def cmd_objective(args) -> int:
    cfg = _config(args, needs_tools=False)
    records = list(read_jsonl(args.batch))
    groups = assemble_groups(records, args.group_size)
    objective = OBJECTIVES[args.algo]
    size = args.minibatch_groups or len(groups)
    if len(groups) % size:
        raise ConfigurationError(f"{len(groups)} groups do not split into minibatches of {size}")
    reports = []
    for start in range(0, len(groups), size):
        result = objective(groups[start:start + size], cfg.optimizer)
        reports.append({**result.report(), "prompt_ids": [g.prompt_id for g in groups[start:start + size]]})
    report = dict(reports[0]) if len(reports) == 1 else {"minibatches": reports}
    report["algo"] = args.algo
    out = _guard_output(args.out, args.force)
    _write_json(out, report)
    figure = out.with_suffix(".png")
    from .plotting import plot_advantages

    plot_advantages(reports, _guard_output(figure, args.force))
    manifest = _manifest(args, cfg, "objective", {"batch": args.batch},
                         {"algo": args.algo, "minibatch_groups": size})
    manifest.outputs = [str(out), str(figure)]
    manifest.write(out)
    manifest.write(figure)
    for r in reports:
        print(f"{args.algo}: value={r['value']:.6g} clip_fraction={r['clip_fraction']:.3f} "
              f"mean_ratio={r['mean_ratio']:.6g} kl={r['kl_value']:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    metric = MetricSpec.parse(args.metric, args.k, args.scorer)
    items = load_items(args.items)
    policy, policy_inputs = build_policy(args.policy, cfg)
    tools = build_toolbox(cfg)
    scorer = build_scorer(metric.scorer, cfg)
    out = _guard_output(args.out, args.force)
    sink = None
    traj_path = None
    if args.trajectories:
        traj_path = _guard_output(args.trajectories, args.force)
        store = TrajectoryStore(traj_path)
        sink = store.append
    report = run_benchmark(items, args.workflow, policy, tools, metric, scorer, cfg.limits,
                           temperature=cfg.temperature, max_workers=args.workers,
                           offline=cfg.tools.offline, trajectory_sink=sink)
    _write_json(out, report.to_dict())
    figure = out.with_suffix(".png")
    from .plotting import plot_metric_report

    plot_metric_report(report.to_dict(), _guard_output(figure, args.force))
    manifest = _manifest(args, cfg, "eval", {"items": args.items, **policy_inputs},
                         {"workflow": args.workflow, "metric": metric.name, "k": metric.k, "scorer": metric.scorer})
    manifest.outputs = [str(p) for p in (out, figure, traj_path) if p is not None]
    for p in manifest.outputs:
        manifest.write(p)
    print(f"{metric.name} ({args.workflow}) = {report.value:.4f} over {len(items)} items, "
          f"{report.infrastructure_failures} infrastructure failures")
    return EXIT_INFRA if report.infrastructure_failures else EXIT_OK


def cmd_classify(args) -> int:
    cfg = _config(args, needs_tools=args.outcomes is None)
    if args.k != PASS_AT_K:
        raise ConfigurationError(f"difficulty labels are defined for k={PASS_AT_K}, got {args.k}")
    items = load_items(args.items)
    runner, extra = _outcome_runner(args, cfg, args.k)
    out = _guard_output(args.out, args.force)
    counts = {"hard": 0, "easy": 0}
    with open(out, "w", encoding="utf-8") as fh:
        for item in items:
            outcomes = list(runner(item, args.k))
            label = difficulty_from_outcomes(outcomes)
            counts[label] += 1
            fh.write(json.dumps({"id": item.id, "label": label, "correct": sum(outcomes), "k": args.k}) + "\n")
    manifest = _manifest(args, cfg, "classify", {"items": args.items, **extra}, {"k": args.k})
    manifest.outputs = [str(out)]
    manifest.write(out)
    print(f"hard={counts['hard']} easy={counts['easy']}")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _config(args, needs_tools=args.outcomes is None)
    items = load_items(args.pool)
    raw_lines = [line for line in Path(args.pool).read_text(encoding="utf-8").splitlines() if line.strip()]
    runner, extra = _outcome_runner(args, cfg, args.k)
    out = _guard_output(args.out, args.force)
    kept = 0
    with open(out, "w", encoding="utf-8") as fh:
        for item, line in zip(items, raw_lines):
            outcomes = list(runner(item, args.k))
            if len(outcomes) != args.k:
                raise ConfigurationError(f"runner returned {len(outcomes)} outcomes for k={args.k}")
            if sum(outcomes) <= args.max_correct:
                fh.write(line + "\n")
                kept += 1
    manifest = _manifest(args, cfg, "filter", {"pool": args.pool, **extra},
                         {"k": args.k, "max_correct": args.max_correct})
    manifest.outputs = [str(out)]
    manifest.write(out)
    print(f"kept {kept} of {len(items)} items")
    return EXIT_OK


def _with_retry(what: str, fn):
    for attempt in (1, 2):
        try:
            return fn()
        except InfrastructureError as exc:
            log.warning("%s failed (attempt %d): %s", what, attempt, exc)
            if attempt == 2:
                raise


def cmd_cache_prefetch(args) -> int:
    cfg = _config(args, needs_tools=False)
    ep = cfg.endpoints
    if not ep.image_search:
        raise ConfigError(["cache-prefetch needs endpoints.image_search"])
    items = load_items(args.items)
    queries = []
    if args.queries:
        queries = [q.strip() for q in Path(args.queries).read_text(encoding="utf-8").splitlines() if q.strip()]
        if not ep.text_search:
            raise ConfigError(["prefetching text queries needs endpoints.text_search"])
    Path(args.out_cache).mkdir(parents=True, exist_ok=True)
    cache = ToolCache(args.out_cache)
    image_backend = LiveImageBackend(ep.image_search, timeout=cfg.tools.timeout)
    text_backend = LiveTextBackend(ep.text_search, timeout=cfg.tools.timeout) if queries else None
    summary = {"image_search": {"fetched": 0, "skipped": 0}, "web_search": {"fetched": 0, "skipped": 0}, "misses": []}
    for item in items:
        for image in item.images[:1]:
            if cache.has(image_search_key(image)):
                summary["image_search"]["skipped"] += 1
                continue
            try:
                results = _with_retry(f"image search for {item.id}", lambda: image_backend.search(image))
            except InfrastructureError as exc:
                summary["misses"].append({"tool": "image_search", "item": item.id, "error": str(exc)})
                continue
            store_image_results(cache, image, results)
            summary["image_search"]["fetched"] += 1
    for q in queries:
        if cache.has(cache_key("web_search", {"query": q})):
            summary["web_search"]["skipped"] += 1
            continue
        try:
            docs = _with_retry(f"web search {q!r}", lambda: text_backend.search(q))
        except InfrastructureError as exc:
            summary["misses"].append({"tool": "web_search", "query": q, "error": str(exc)})
            continue
        store_text_results(cache, q, docs)
        summary["web_search"]["fetched"] += 1
    out = Path(args.out_cache) / "prefetch-summary.json"
    _write_json(out, summary)
    manifest = _manifest(args, cfg, "cache-prefetch", {"items": args.items, "queries": args.queries},
                         {"out_cache": str(args.out_cache)})
    manifest.outputs = [str(args.out_cache), str(out)]
    manifest.write(out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_INFRA if summary["misses"] else EXIT_OK


def cmd_histogram(args) -> int:
    cfg = _config(args, needs_tools=False)
    groups = {}
    inputs = {}
    for spec in args.trajectories:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if name in groups:
            raise ConfigurationError(f"benchmark name {name!r} given twice")
        groups[name] = list(read_jsonl(path))
        inputs[f"trajectories:{name}"] = path
    hist = tool_usage_histogram(groups)
    out = _guard_output(args.out, args.force)
    _write_json(out, hist)
    figure = out.with_suffix(".png")
    from .plotting import plot_tool_usage

    plot_tool_usage(hist, _guard_output(figure, args.force))
    manifest = _manifest(args, cfg, "histogram", inputs, {"benchmarks": sorted(groups)})
    manifest.outputs = [str(out), str(figure)]
    manifest.write(out)
    manifest.write(figure)
    for name, entry in hist["benchmarks"].items():
        print(name, json.dumps(entry["counts"], sort_keys=True))
    return EXIT_OK


def cmd_validate_config(args) -> int:
    cfg = load_config(args.config, _parse_sets(args.set))
    resolved = {"config_hash": cfg.snapshot_hash(), "config": cfg.to_dict()}
    if args.out:
        out = _guard_output(args.out, args.force)
        _write_json(out, resolved)
        manifest = _manifest(args, cfg, "validate-config", {}, {})
        manifest.outputs = [str(out)]
        manifest.write(out)
    print(f"config ok ({cfg.snapshot_hash()[:12]})")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "--tools", dest="config", help="YAML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. limits.max_turns=5")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="agentkernel", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rollout", parents=[common], help="sample and score G trajectories per item")
    p.add_argument("--items", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="http(s) URL or script:FILE")
    p.add_argument("--group-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("objective", parents=[common], help="evaluate the clipped objective on a logged batch")
    p.add_argument("--batch", required=True, help="JSONL trajectories with logprobs {new, old, ref, mask}")
    p.add_argument("--out", required=True)
    p.add_argument("--algo", choices=sorted(OBJECTIVES), default="bn-gspo")
    p.add_argument("--group-size", type=int)
    p.add_argument("--minibatch-groups", type=int, help="groups per minibatch (default: all)")
    p.set_defaults(func=cmd_objective)

    p = sub.add_parser("eval", parents=[common], help="run a benchmark and report Pass@1 or Avg@k")
    p.add_argument("--items", required=True)
    p.add_argument("--workflow", choices=WORKFLOWS, default="agentic")
    p.add_argument("--metric", default="pass1", help="pass1 or avg@k")
    p.add_argument("--k", type=int)
    p.add_argument("--scorer", choices=("judge", "exact_match"), help="override the metric's default scorer")
    p.add_argument("--policy")
    p.add_argument("--out", required=True)
    p.add_argument("--trajectories", help="also persist every trajectory to this JSONL")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    for name, items_flag, func in (("classify", "--items", cmd_classify), ("filter", "--pool", cmd_filter)):
        p = sub.add_parser(name, parents=[common],
                           help="pass@8 hard/easy labels" if name == "classify" else "keep rarely-solved items")
        p.add_argument(items_flag, dest="pool" if name == "filter" else "items", required=True)
        p.add_argument("--k", type=int, default=PASS_AT_K)
        p.add_argument("--policy")
        p.add_argument("--outcomes", help="JSON {item_id: [bool, ...]} instead of running the policy")
        p.add_argument("--out", required=True)
        if name == "filter":
            p.add_argument("--max-correct", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("cache-prefetch", parents=[common], help="fill the offline tool cache from live backends")
    p.add_argument("--items", required=True)
    p.add_argument("--queries", help="text file, one web-search query per line")
    p.add_argument("--out-cache", required=True)
    p.set_defaults(func=cmd_cache_prefetch)

    p = sub.add_parser("histogram", parents=[common], help="tool-call counts per benchmark")
    p.add_argument("--trajectories", action="append", required=True, metavar="NAME=FILE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("validate-config", parents=[common], help="check a configuration file")
    p.add_argument("--out", help="write the resolved configuration here")
    p.set_defaults(func=cmd_validate_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, ItemFileError, OptimizerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfrastructureError as exc:
        print(f"infrastructure failure: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except AssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
