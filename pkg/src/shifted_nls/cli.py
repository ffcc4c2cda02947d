"""Command-line interface: ``align``, ``search``, ``flow``, ``bench`` and ``model``.

Exit status is 0 on success, 1 on runtime failures (I/O, bad file
contents) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import itertools
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .flow import (estimate_flow_block_matching, mean_abs_flow, read_flo, read_flo_dir,
                   write_flo)
from .harness import (align_frames, global_reads_model, n3net_memory_factor, parse_grid,
                      rows_to_csv, run_benchmark)
from .search import SearchConfig, paired_search, shifted_nls_forward
from .tensor_core import load_frame, load_raw, load_video, save_raw, save_video


class UsageError(Exception):
    pass


def _add_search_flags(p, *, ws=9, topl=True, wt=True):
    p.add_argument("--ws", type=int, default=ws, help="spatial window size W_s (odd)")
    if wt:
        p.add_argument("--wt", type=int, default=0, help="temporal radius; frames searched = 2*wt+1")
    p.add_argument("--ps", type=int, default=1, help="patch size P (odd)")
    p.add_argument("--stride0", type=int, default=1, help="query stride S_Q (integer)")
    p.add_argument("--stride1", type=float, default=1.0, help="key stride S_K (may be fractional)")
    if topl:
        p.add_argument("--topl", type=int, default=1, help="number of neighbors L kept per query")
    p.add_argument("--metric", choices=["l2", "ip"], default="l2",
                   help="l2: negative squared distance; ip: inner product")
    p.add_argument("--fused", action="store_true", help="stream a running top-L instead of the full grid")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")


def _cfg(args, **over):
    kw = dict(ws=args.ws, wt=getattr(args, "wt", 0), ps=args.ps, stride0=args.stride0,
              stride1=args.stride1, topl=getattr(args, "topl", 1), metric=args.metric)
    kw.update(over)
    return SearchConfig(**kw)


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{p}: no such file or directory")
    return p


def _load_flow(path):
    """Flows from a ``.flo`` file, a directory of ``.flo`` files or a raw tensor."""
    p = _existing(path)
    if p.is_dir():
        return read_flo_dir(p)
    if p.suffix == ".flo":
        return read_flo(p)[None]
    arr = load_raw(p)
    if arr.shape[-1] != 2:
        raise FormatError(f"{p}: flow tensor needs 2 channels, got {arr.shape[-1]}")
    return arr


def cmd_align(args):
    video = load_video(_existing(args.frames))
    if args.flow in ("zero", "bm"):
        flow = args.flow
    else:
        flow = _load_flow(args.flow)
    aligned, report = align_frames(video, _cfg(args), flow, args.sigma, args.seed,
                                   peak=args.peak, bm_block=args.bm_block,
                                   bm_radius=args.bm_radius, threads=args.threads,
                                   fused=args.fused)
    if args.out:
        save_video(aligned, args.out)
    text = report.to_jsonl()
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_search(args):
    Q = load_video(_existing(args.q))
    K = load_video(_existing(args.k))
    if args.flow and (args.fflow or args.bflow):
        raise UsageError("--flow (paired search) excludes --fflow/--bflow")
    cfg = _cfg(args)
    if args.flow:
        flow = _load_flow(args.flow)
        if flow.shape[0] == 1 and Q.shape[0] > 1:
            flow = np.broadcast_to(flow, (Q.shape[0],) + flow.shape[1:])
        vals, offs, _ = paired_search(Q, K, flow, cfg, fused=args.fused, threads=args.threads)
    else:
        fflow = _load_flow(args.fflow) if args.fflow else None
        bflow = _load_flow(args.bflow) if args.bflow else None
        vals, offs, _ = shifted_nls_forward(Q, K, fflow, bflow, cfg, fused=args.fused,
                                            threads=args.threads)
    save_raw(offs[None].astype(np.float64), args.out_inds)
    save_raw(vals[None, ..., None].astype(np.float64), args.out_dists)
    print(f"nq={offs.shape[0]} topl={offs.shape[1]} inds={args.out_inds} dists={args.out_dists}")
    return 0


def cmd_flow(args):
    if args.flow_cmd == "estimate":
        a = load_frame(_existing(args.a))
        b = load_frame(_existing(args.b))
        fl = estimate_flow_block_matching(a, b, args.block, args.radius)
        if args.out.endswith(".stnt"):
            save_raw(fl[None], args.out)
        else:
            write_flo(fl, args.out)
        print(f"mean_abs_flow={mean_abs_flow(fl):.6g} out={args.out}")
    elif args.flow_cmd == "convert":
        fl = _load_flow(args.input)
        if args.out.endswith(".stnt"):
            save_raw(fl.astype(np.float32), args.out)
        else:
            if fl.shape[0] != 1:
                raise UsageError("only single-frame flows convert to .flo")
            write_flo(fl[0], args.out)
    else:
        fl = _load_flow(args.input)
        print(f"{mean_abs_flow(fl):.6g}")
    return 0


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError("shape must be T,H,W,F with positive entries")
    return dims


def cmd_bench(args):
    grid = parse_grid(_existing(args.grid).read_text())
    rows = run_benchmark(grid, args.shape, args.seed, args.repeats, threads=args.threads)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_model(args):
    if args.model == "reads":
        combos = list(itertools.product(args.q, args.ws))
        for q, ws in combos:
            a, b = global_reads_model(q, ws)
            prefix = f"q={q} ws={ws}: " if len(combos) > 1 else ""
            print(f"{prefix}{a} {b}")
    else:
        combos = list(itertools.product(args.ps, args.sq, args.sk))
        for ps, sq, sk in combos:
            prefix = f"ps={ps} sq={sq:g} sk={sk:g}: " if len(combos) > 1 else ""
            print(f"{prefix}{n3net_memory_factor(ps, sq, sk):g}")
    return 0


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="shifted-nls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("align", help="align each frame t+1 onto frame t and report PSNR")
    p.add_argument("--frames", required=True, help="PNG frame directory or .stnt video")
    p.add_argument("--flow", default="bm",
                   help="zero | bm | .flo file, .flo directory or .stnt forward flows")
    p.add_argument("--sigma", type=float, default=15.0, help="Gaussian noise std on the 0-255 scale")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--peak", type=float, default=255.0, help="PSNR peak value")
    p.add_argument("--bm-block", type=int, default=5, help="block size for --flow bm")
    p.add_argument("--bm-radius", type=int, default=4, help="search radius for --flow bm")
    p.add_argument("--out", help="write aligned frames (.stnt file or PNG directory)")
    p.add_argument("--report", help="write the JSON-lines report here instead of stdout")
    _add_search_flags(p, ws=11, topl=False, wt=False)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("search", help="run the (shifted) search and dump offsets and scores")
    p.add_argument("--q", required=True, help="query video (.stnt or PNG directory)")
    p.add_argument("--k", required=True, help="key video (.stnt or PNG directory)")
    p.add_argument("--flow", help="paired search: window shift per query frame (.flo/.stnt)")
    p.add_argument("--fflow", help="shifted search: forward flows (.stnt or .flo directory)")
    p.add_argument("--bflow", help="shifted search: backward flows (.stnt or .flo directory)")
    p.add_argument("--out-inds", default="inds.stnt", help="offsets output, shape (1, nQ, L, 3)")
    p.add_argument("--out-dists", default="dists.stnt", help="scores output, shape (1, nQ, L, 1)")
    _add_search_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("flow", help="estimate, convert or summarize flow fields")
    fsub = p.add_subparsers(dest="flow_cmd", required=True)
    e = fsub.add_parser("estimate", help="block-matching flow from frame a to frame b")
    e.add_argument("--a", required=True, help="source frame (.png or .stnt)")
    e.add_argument("--b", required=True, help="target frame (.png or .stnt)")
    e.add_argument("--block", type=int, default=5, help="block size (odd)")
    e.add_argument("--radius", type=int, default=4, help="search radius in pixels")
    e.add_argument("--out", default="flow.flo", help="output .flo (or .stnt) path")
    c = fsub.add_parser("convert", help="convert between .flo and .stnt")
    c.add_argument("--in", dest="input", required=True, help="input .flo, .flo directory or .stnt")
    c.add_argument("--out", required=True, help="output .flo or .stnt path")
    s = fsub.add_parser("stats", help="print the mean absolute flow")
    s.add_argument("--in", dest="input", required=True, help="input .flo, .flo directory or .stnt")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("bench", help="benchmark search configs, CSV output")
    p.add_argument("--grid", required=True, help="config grid file, one key=value line per config")
    p.add_argument("--repeats", type=int, default=3, help="timed runs per config (>= 3)")
    p.add_argument("--shape", type=_shape, default=(5, 64, 64, 8), help="video shape T,H,W,F")
    p.add_argument("--seed", type=int, default=0, help="seed for the random video and flows")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("model", help="analytical cost models")
    msub = p.add_subparsers(dest="model", required=True)
    r = msub.add_parser("reads", help="global reads: overlapping vs non-overlapping windows")
    r.add_argument("--q", type=_pos_int, nargs="+", default=[3], help="tile size(s)")
    r.add_argument("--ws", type=_pos_int, nargs="+", required=True, help="window size(s)")
    m = msub.add_parser("n3mem", help="memory factor of an unfolded patch database")
    m.add_argument("--ps", type=_pos_int, nargs="+", required=True, help="patch size(s)")
    m.add_argument("--sq", type=_pos_float, nargs="+", default=[1.0], help="query stride(s)")
    m.add_argument("--sk", type=_pos_float, nargs="+", default=[1.0], help="key stride(s)")
    p.set_defaults(func=cmd_model)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, FormatError, OSError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
