"""``mcforge`` command line.

Exit codes: 0 success, 1 a module error (one ``error: <code>: <message>``
line on stderr), 2 bad usage.  ``--json`` prints each command's result record
as JSON on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import Config, load_config
from .errors import MCForgeError

log = logging.getLogger("mcforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _pick(flag, cfg: Config, section: str, key: str, default=None):
    if flag is not None:
        return flag
    return cfg.get(section, key, default)


def _need(value, what: str):
    if value is None:
        raise UsageError(f"missing {what} (give the flag or set it in the config file)")
    return value


def _say(args, value) -> None:
    # plain result line; with --json the record on stdout carries it instead
    if not args.json:
        print(value)


# ------------------------------------------------------------------ commands


def cmd_gen(args, cfg: Config) -> dict:
    from .deck import CyclePlan, generate_cycles, load_parameters, read_deck

    template = _need(_pick(args.template, cfg, "paths", "template"), "--template")
    params_path = _need(_pick(args.params, cfg, "paths", "params"), "--params")
    out_dir = _pick(args.out_dir, cfg, "paths", "output_dir", ".")
    params = load_parameters(params_path)
    base_seed = args.base_seed if args.base_seed is not None else int(float(params.get("seed", "1")))
    plan = CyclePlan(_pick(args.prefix, cfg, "workflow", "prefix", "example"),
                     _pick(args.count, cfg, "workflow", "cycles", 5), base_seed, Path(out_dir))
    paths = generate_cycles(read_deck(template), params, plan)
    for p in paths:
        log.info("written %s", p)
    return {"written": [str(p) for p in paths], "base_seed": base_seed}


def _run_config(args, cfg: Config, execution_dir):
    from .mockengine import MockEngineSpec
    from .runner import RunConfig

    return RunConfig(
        execution_dir,
        executable=_pick(args.executable, cfg, "run", "executable", ""),
        job_script_prefix=cfg.get("run", "job_script_prefix", "AutoFLUKA_job"),
        max_parallel=_pick(args.max_parallel, cfg, "run", "max_parallel"),
        engine=_pick(args.engine, cfg, "run", "engine", "external"),
        mock=MockEngineSpec(**cfg.section("mock")),
    )


def cmd_run(args, cfg: Config) -> dict:
    from .runner import emit_job_scripts, execute_all

    inputs = [Path(p) for p in args.inputs]
    if not inputs:
        d = Path(_pick(args.dir, cfg, "paths", "output_dir", "."))
        inputs = sorted(d.glob("*.inp"))
    exec_dir = Path(args.dir) if args.dir else (inputs[0].parent if inputs else Path("."))
    rc = _run_config(args, cfg, exec_dir)
    records, wall = execute_all(emit_job_scripts(inputs, rc), rc)
    for r in records:
        print(f"{r.job_script.name} for : {r.input_file.name} -> {r.status}", file=sys.stderr)
    result = {"jobs": [r.to_dict() for r in records], "simulation_time": wall}
    if any(r.status != "succeeded" for r in records):
        failed = [r.input_file.name for r in records if r.status != "succeeded"]
        raise MCForgeError(f"{len(failed)} job(s) failed: {', '.join(failed)}", result=result)
    return result


def _utility_table(engine: str, cfg: Config):
    from .postproc import default_utility_table, mock_utility_table

    return mock_utility_table() if engine == "mock" else default_utility_table(cfg.section("utilities"))


def cmd_decrypt(args, cfg: Config) -> dict:
    from .postproc import decrypt_all

    d = Path(_pick(args.dir, cfg, "paths", "output_dir", "."))
    engine = _pick(args.engine, cfg, "run", "engine", "external")
    produced = decrypt_all(d, _utility_table(engine, cfg), args.cycles,
                           output_base=_pick(args.output_base, cfg, "workflow", "output_base", "output"))
    return {"produced": [str(p) for p in produced], "log": str(d / "decryption_logs")}


def cmd_store(args, cfg: Config) -> dict:
    from .postproc import build_store

    files = [Path(p) for p in args.files]
    d = Path(_pick(args.dir, cfg, "paths", "output_dir", "."))
    if not files:
        files = sorted(list(d.glob("*_sum.lis")) + list(d.glob("*_tab.lis")))
    out = Path(args.out) if args.out else d / "fluka_data.json"
    data = build_store(files, out)
    return {"store": str(out), "files": sorted(data.files), "warnings": data.warnings,
            "average_uncertainty": {k: e.average_uncertainty for k, e in sorted(data.files.items())
                                    if e.average_uncertainty is not None}}


def cmd_stats(args, cfg: Config) -> dict:
    from .postproc import load_store, parse_tab
    from .stats import average_energy, average_uncertainty, required_nps

    if args.stats_cmd == "nps":
        est = required_nps(args.current_u, args.target_u, args.nps, args.granularity)
        _say(args, est.required_nps)
        return {"required_nps": est.required_nps, "raw_nps": est.raw_nps, "current_nps": est.current_nps,
                "current_u": est.current_u, "target_u": est.target_u, "granularity": est.granularity}
    if args.stats_cmd in ("uncertainty", "avg"):
        if args.file.endswith(".json"):
            data = load_store(args.file)
            if not args.key:
                raise UsageError("--key is required with a JSON store")
            rows = data.files[args.key].section.rows
        else:
            rows = parse_tab(Path(args.file).read_text(encoding="utf-8")).rows
        rep = average_uncertainty(rows)
        _say(args, repr(rep.average_uncertainty))
        return {"average_uncertainty": rep.average_uncertainty, "total_weight": rep.total_weight,
                "n_bins": rep.n_bins}
    rows = parse_tab(Path(args.file).read_text(encoding="utf-8")).rows
    e = average_energy([(r[0], r[1], r[2]) for r in rows])
    _say(args, repr(e))
    return {"average_energy": e}


def cmd_micro(args, cfg: Config) -> dict:
    from .microdose import LinearSpectrum, SiteGeometry, analyze, emit_results, load_gain_table
    from .postproc import parse_tab

    geo = cfg.section("geometry")
    for key in ("dt", "clf", "flag"):
        if getattr(args, key) is not None:
            geo[key] = getattr(args, key)
    geom = SiteGeometry(**geo)
    gains_path = _pick(args.gains, cfg, "workflow", "gain_table")
    gains = load_gain_table(gains_path) if gains_path else None
    spec = LinearSpectrum.from_tab_rows(parse_tab(Path(args.tab).read_text(encoding="utf-8")).rows)
    _, spectra = analyze(spec, geom, gains, _pick(args.bins_per_decade, cfg, "workflow", "bins_per_decade", 60),
                         _pick(args.kernel, cfg, "workflow", "kernel", "icru40"),
                         _pick(args.sums, cfg, "workflow", "sums", "dy-weighted"))
    out = Path(_pick(args.out_dir, cfg, "paths", "output_dir", "."))
    paths = emit_results(spectra, out)
    return {**spectra.summary(), "files": [str(p) for p in paths]}


def _flags(args, cfg: Config) -> dict:
    flags = cfg.section("plot")
    for k in ("plot_error_bars", "plot_blocks", "log_scale", "semilogx", "semilogy"):
        v = getattr(args, k, None)
        if v is not None:
            flags[k] = v
    return flags


def cmd_plot(args, cfg: Config) -> dict:
    from .plotsvg import plot_store
    from .postproc import load_store

    base = Path(cfg.get("paths", "output_dir", "."))
    store = Path(args.store) if args.store else base / "fluka_data.json"
    out_dir = Path(args.out_dir) if args.out_dir else store.parent
    paths = plot_store(load_store(store), _flags(args, cfg), out_dir)
    return {"plots": [str(p) for p in paths]}


def workflow_config(args, cfg: Config):
    from .microdose import SiteGeometry
    from .mockengine import MockEngineSpec
    from .plotsvg import PlotFlags
    from .postproc import default_utility_table
    from .workflow import WorkflowConfig

    wf = cfg.section("workflow")
    engine = _pick(args.engine, cfg, "run", "engine", "mock")
    if args.mode:
        wf["mode"] = args.mode
    if args.auto_approve:
        wf["auto_approve"] = True
    plot = cfg.section("plot")
    flags = PlotFlags(**plot) if plot else PlotFlags(semilogx=True)
    return WorkflowConfig(
        template_path=_need(_pick(args.template, cfg, "paths", "template"), "template path"),
        params_path=_need(_pick(args.params, cfg, "paths", "params"), "parameters path"),
        output_dir=_need(_pick(args.out_dir, cfg, "paths", "output_dir"), "output directory"),
        engine=engine,
        executable=cfg.get("run", "executable", ""),
        max_parallel=cfg.get("run", "max_parallel"),
        job_script_prefix=cfg.get("run", "job_script_prefix", "AutoFLUKA_job"),
        mock=MockEngineSpec(**cfg.section("mock")),
        utilities=None if engine == "mock" else default_utility_table(cfg.section("utilities")),
        geometry=SiteGeometry(**cfg.section("geometry")),
        plot_flags=flags,
        **wf,
    )


def cmd_workflow(args, cfg: Config) -> dict:
    from .workflow import run_workflow

    wcfg = workflow_config(args, cfg)
    approver = None if wcfg.auto_approve else _console_approver
    url = args.llm_url or cfg.get("provider", "url")
    if url:
        from .orchestrator import HttpChatEndpoint, orchestrate_llm

        model = _need(args.model or cfg.get("provider", "model"), "--model")
        result = orchestrate_llm(wcfg, HttpChatEndpoint(url, model), budget=cfg.get("provider", "budget", 50),
                                 approver=approver)
    else:
        result = run_workflow(wcfg, approver)
    st = result.state
    rep = st.last_report
    return {"state": st.step, "refinements": st.refinement_count,
            "average_uncertainty": rep.average_uncertainty if rep else None,
            "steps": [e["step"] for e in st.trace], "artifacts": result.artifacts}


def _console_approver(step: str, bundle: Path) -> bool:
    print(f"review {step}: {bundle}", file=sys.stderr)
    try:
        reply = input("approve? [y/N] ")
    except EOFError:
        return False
    return reply.strip().lower() in ("y", "yes")


def _assistant_parts(args, cfg: Config):
    from .assistant import VectorStore, get_embedder

    a = cfg.section("assistant")
    store_path = _need(args.store or a.get("store"), "--store")
    name = a.get("embedder", "hash")
    opts = {"dim": a.get("embed_dim", 256)}
    if name == "http":
        opts.update(url=a.get("embed_url"), model=a.get("embed_model"))
    return VectorStore.open(store_path), get_embedder(name, **opts), a


def cmd_assist(args, cfg: Config) -> dict:
    from .assistant import EchoEndpoint, answer, ingest

    store, embedder, a = _assistant_parts(args, cfg)
    if args.assist_cmd == "ingest":
        docs = _need(args.docs or a.get("docs"), "--docs")
        n_docs, n_chunks = ingest(docs, store, embedder, a.get("chunk_size", 1000), a.get("overlap", 200),
                                  a.get("extract_cmd"))
        print(f"ingested {n_docs} new document(s), {n_chunks} chunk(s)", file=sys.stderr)
        return {"new_documents": n_docs, "new_chunks": n_chunks, "store": str(store.path)}

    if args.echo:
        endpoint = EchoEndpoint()
    else:
        from .orchestrator import HttpChatEndpoint

        url = _need(args.llm_url or cfg.get("provider", "url"), "--llm-url (or use --echo)")
        endpoint = HttpChatEndpoint(url, _need(args.model or cfg.get("provider", "model"), "--model"))
    k = args.k or a.get("k", 4)
    memory: list[dict] = []
    if args.question:
        ans = answer(" ".join(args.question), store, embedder, endpoint, memory, k)
        _say(args, ans.text)
        return {"answer": ans.text, "cited": ans.cited, "scores": ans.scores}
    # interactive session with conversation memory
    turns = []
    while True:
        try:
            q = input("> ").strip()
        except EOFError:
            break
        if q in ("", "exit", "quit"):
            break
        ans = answer(q, store, embedder, endpoint, memory, k)
        print(ans.text)
        turns.append({"question": q, "answer": ans.text, "cited": ans.cited})
    return {"turns": turns}


# ------------------------------------------------------------------ parser


def _with_common(add, common):
    def add_parser(name, **kw):
        return add(name, parents=[common], **kw)
    return add_parser


def build_parser() -> argparse.ArgumentParser:
    # global options are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML configuration file")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="print the result record as JSON")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    ap = _Parser(prog="mcforge", description="Monte Carlo simulation workflow tools.", parents=[common])
    ap.add_argument("--version", action="version", version=f"mcforge {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser = _with_common(sub.add_parser, common)

    p = sub.add_parser("gen", help="generate cycle input files from a template")
    p.add_argument("--template")
    p.add_argument("--params")
    p.add_argument("--prefix")
    p.add_argument("--count", type=int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run input files through the simulation executable")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--dir", help="execution directory (default: directory of the inputs)")
    p.add_argument("--engine", choices=("external", "mock"))
    p.add_argument("--executable")
    p.add_argument("--max-parallel", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("decrypt", help="merge binary unit files with the post-processing utilities")
    p.add_argument("--dir")
    p.add_argument("--engine", choices=("external", "mock"))
    p.add_argument("--cycles", type=int)
    p.add_argument("--output-base")
    p.set_defaults(func=cmd_decrypt)

    p = sub.add_parser("store", help="parse .lis files into fluka_data.json")
    p.add_argument("files", nargs="*")
    p.add_argument("--dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("stats", help="uncertainty and primaries arithmetic")
    ss = p.add_subparsers(dest="stats_cmd", parser_class=_Parser, required=True)
    ss.add_parser = _with_common(ss.add_parser, common)
    q = ss.add_parser("nps", help="primaries needed for a target uncertainty")
    q.add_argument("--current-u", type=float, required=True)
    q.add_argument("--target-u", type=float, required=True)
    q.add_argument("--nps", type=int, required=True)
    q.add_argument("--granularity", type=int, default=100_000)
    q = ss.add_parser("uncertainty", aliases=["avg"], help="count-weighted average uncertainty of a tab file or store entry")
    q.add_argument("file")
    q.add_argument("--key")
    q = ss.add_parser("energy", help="count-weighted mean energy of a tab file")
    q.add_argument("file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("micro", help="microdosimetric spectra from a DETECT tab file")
    p.add_argument("tab")
    p.add_argument("--dt", type=float)
    p.add_argument("--clf", type=float)
    p.add_argument("--flag", type=int, choices=(0, 1))
    p.add_argument("--gains")
    p.add_argument("--bins-per-decade", type=int)
    p.add_argument("--kernel")
    p.add_argument("--sums", choices=("dy-weighted", "appendix-literal-sums"))
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_micro)

    p = sub.add_parser("plot", help="plot every spectrum in a data store")
    p.add_argument("--store")
    p.add_argument("--out-dir")
    for flag in ("plot-error-bars", "plot-blocks", "log-scale", "semilogx", "semilogy"):
        p.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("workflow", help="run the whole pipeline")
    p.add_argument("--template")
    p.add_argument("--params")
    p.add_argument("--out-dir")
    p.add_argument("--engine", choices=("external", "mock"))
    p.add_argument("--mode", choices=("general", "microdosimetry"))
    p.add_argument("--auto-approve", action="store_true")
    p.add_argument("--llm-url", help="chat-completions URL; drives the pipeline through tool calls")
    p.add_argument("--model")
    p.set_defaults(func=cmd_workflow)

    p = sub.add_parser("assist", help="question answering over a document folder")
    sa = p.add_subparsers(dest="assist_cmd", parser_class=_Parser, required=True)
    sa.add_parser = _with_common(sa.add_parser, common)
    q = sa.add_parser("ingest")
    q.add_argument("--docs")
    q.add_argument("--store")
    q = sa.add_parser("ask")
    q.add_argument("question", nargs="*")
    q.add_argument("--store")
    q.add_argument("--k", type=int)
    q.add_argument("--echo", action="store_true", help="echo the prompt instead of calling a model")
    q.add_argument("--llm-url")
    q.add_argument("--model")
    p.set_defaults(func=cmd_assist)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        for name, default in (("config", None), ("json", False), ("verbose", 0)):
            if not hasattr(args, name):
                setattr(args, name, default)
        if not args.command:
            ap.print_help(sys.stderr)
            return 2
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config) if args.config else Config()
        result = args.func(args, cfg)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except MCForgeError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
        if getattr(args, "json", False):
            print(json.dumps({"ok": False, "error": exc.code, "message": msg}, sort_keys=True))
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps({"ok": True, "command": args.command, "result": result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
