"""Command-line entry point.

Exit codes: 0 success, 1 input or configuration error, 2 no RANSAC consensus.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pcloop import evaluation as ev
from pcloop import io as pio
from pcloop import loopclosure as lc
from pcloop.config import Settings, build_settings, load_config
from pcloop.descriptors import describe_keyframe
from pcloop.errors import NoConsensus, PcloopError
from pcloop.geometry import RigidTransform, format_transform
from pcloop.matching import mnn_overlap, mutual_nn
from pcloop.records import KeyframeRecord
from pcloop.registration import ransac_register

log = logging.getLogger("pcloop")

EXIT_OK, EXIT_INPUT, EXIT_NO_CONSENSUS = 0, 1, 2


class InputError(Exception):
    pass


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"input path does not exist: {p}")
    return p


def _settings(args) -> Settings:
    values = load_config(_require(args.config)) if args.config else {}
    return build_settings(values, seed=args.seed, profile=getattr(args, "profile", None))


def _emit(text: str, out) -> None:
    if out:
        pio.atomic_write(out, text)
    sys.stdout.write(text)


# ---------------------------------------------------------------- gen-synthetic


def cmd_gen_synthetic(args) -> int:
    from pcloop import synthetic as syn

    s = _settings(args)
    out = Path(args.out)
    seq = syn.gen_trajectory(
        args.frames,
        syn.LoopSpec(n_loops=args.loops, crop=args.crop, min_gap=args.min_gap),
        syn.SceneSpec(noise=args.noise, seed=s.seed),
        seed=s.seed,
    )
    describe = lc.fpfh_describer(s.sampling)
    entries = []
    for kf in seq.keyframes:
        cloud_rel = f"clouds/{kf.id:06d}.ply"
        desc_rel = f"descriptors/{kf.id:06d}.l3dd"
        pio.write_ply(out / cloud_rel, kf.cloud, precision="double")
        dk = describe(kf)
        pio.write_descriptors(out / desc_rel, dk.points, dk.descriptors)
        entries.append(
            {
                "id": kf.id,
                "timestamp": kf.timestamp,
                "cloud": cloud_rel,
                "descriptors": desc_rel,
                "pose": kf.pose_prior.to_row(),
            }
        )
    pio.write_trajectory(out / "trajectory.txt", seq.trajectory)
    pio.atomic_write(out / "labels.csv", ev.format_labels(syn.sequence_labels(seq)))
    planted = ["i,j," + ",".join(f"t{r}{c}" for r in range(4) for c in range(4))]
    planted += [f"{l.i},{l.j}," + format_transform(l.transform).replace(" ", ",") for l in seq.loops]
    pio.atomic_write(out / "planted_loops.csv", "\n".join(planted) + "\n")
    manifest = {
        "profile": s.profile,
        "keyframes": entries,
        "trajectory": "trajectory.txt",
        "labels": "labels.csv",
    }
    pio.atomic_write(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(entries)} keyframes and {len(seq.loops)} planted loops to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ detect-loops


def load_manifest(path):
    """Parse a run manifest and check that every referenced file exists."""
    mpath = _require(path)
    try:
        data = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{mpath}: invalid JSON: {exc}") from exc
    base = mpath.parent
    if "keyframes" not in data:
        raise InputError(f"{mpath}: manifest lacks a 'keyframes' list")
    for e in data["keyframes"]:
        for key in ("cloud", "descriptors"):
            if key in e:
                e[key] = _require(base / e[key])
    return data


def cmd_detect_loops(args) -> int:
    manifest = load_manifest(args.manifest)
    cli_profile = args.profile
    args.profile = cli_profile or manifest.get("profile")
    s = _settings(args)
    mode = args.mode or s.mode
    stride = args.stride or s.stride
    backend = args.backend or s.backend
    loop_cfg = s.loop
    if args.rank_by:
        loop_cfg = lc.LoopConfig(**{**loop_cfg.__dict__, "rank_by": args.rank_by})

    def stream():
        for e in manifest["keyframes"]:
            pose = RigidTransform.from_matrix(e["pose"]) if e.get("pose") else None
            kid, ts = int(e["id"]), float(e.get("timestamp", 0.0))
            if backend == "external":
                if "descriptors" not in e:
                    raise InputError(f"keyframe {kid} has no descriptor file")
                pts, D = pio.read_descriptors(e["descriptors"])
                yield lc.DescribedKeyframe(kid, ts, pts, D, pose)
            else:
                if "cloud" not in e:
                    raise InputError(f"keyframe {kid} has no cloud file")
                yield KeyframeRecord(kid, ts, pio.read_cloud(e["cloud"]), pose)

    result = lc.run_sequence(stream(), loop_cfg, s.ransac, mode, stride, lc.fpfh_describer(s.sampling))
    out = Path(args.out)
    pio.atomic_write(out / "scores.csv", lc.format_score_log(result.scores))
    pio.atomic_write(out / "loops.csv", lc.format_loops(result.verdicts))
    print(f"queries={result.n_queries} scored_pairs={len(result.scores)} accepted={len(result.accepted)}")
    return EXIT_OK


# ----------------------------------------------------------------- register-pair


def _describe_file(path, s: Settings):
    p = _require(path)
    if p.suffix.lower() == ".l3dd":
        return pio.read_descriptors(p)
    sampling = s.sampling.with_seed(lc.keyframe_seed(s.seed, 0))
    return describe_keyframe(KeyframeRecord(0, 0.0, pio.read_cloud(p)), sampling, "fpfh")


def cmd_register_pair(args) -> int:
    s = _settings(args)
    Pa, Da = _describe_file(args.cloud_a, s)
    Pb, Db = _describe_file(args.cloud_b, s)
    C = mutual_nn(Da, Db)
    o = mnn_overlap(C)
    try:
        reg = ransac_register(Pa, Pb, C, s.ransac)
    except NoConsensus as exc:
        sys.stdout.write(f"overlap={o!r} ron=nan\ndecision={lc.REJECTED_REGISTRATION}\n")
        print(f"error: no consensus: {exc}", file=sys.stderr)
        return EXIT_NO_CONSENSUS
    r = lc.ron(Pa, Pb, C, reg.transform, s.loop.tau_e)
    if not o > s.loop.tau_o:
        decision = lc.REJECTED_OVERLAP
    else:
        decision = lc.ACCEPTED if r > s.loop.tau_rho else lc.REJECTED_RON
    M = reg.transform.as_matrix()
    rows = "\n".join(" ".join(repr(float(v)) for v in M[k]) for k in range(4))
    _emit(f"overlap={o!r} ron={r!r}\ndecision={decision}\n{rows}\n", args.out)
    return EXIT_OK


# ------------------------------------------------------------------ evaluation


def cmd_eval_pr(args) -> int:
    _settings(args)
    scores = lc.parse_score_log(_require(args.scores).read_text())
    labels = ev.parse_labels(_require(args.labels).read_text())
    curve = ev.pr_curve(scores, labels, args.score)
    _emit(ev.format_pr(curve), args.out)
    return EXIT_OK


def cmd_eval_ate(args) -> int:
    _settings(args)
    est = pio.read_trajectory(_require(args.est))
    gt = pio.read_trajectory(_require(args.gt))
    rmse, S = ev.ate_rmse(est, gt, args.max_dt)
    _emit(ev.format_ate(rmse, S), args.out)
    return EXIT_OK


def cmd_extract_fpfh(args) -> int:
    s = _settings(args)
    cloud = pio.read_cloud(_require(args.cloud))
    pts, D = describe_keyframe(KeyframeRecord(0, 0.0, cloud), s.sampling, "fpfh")
    pio.write_descriptors(args.out, pts, D)
    print(f"wrote {len(D)} descriptors (dim {D.dim}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcloop", description="Loop-closure detection for point-cloud SLAM from local descriptors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help, out_required=False):
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config file)")
        p.add_argument("--config", default=None, help="key=value configuration file")
        p.add_argument("--out", required=out_required, default=None, help=out_help)
        p.add_argument("--profile", choices=("indoor", "lidar"), default=None, help="dataset profile")

    p = sub.add_parser("gen-synthetic", help="write a synthetic keyframe sequence with planted loops")
    common(p, "output directory", out_required=True)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--loops", type=int, default=5)
    p.add_argument("--crop", type=float, default=0.6)
    p.add_argument("--min-gap", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.001)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("detect-loops", help="run loop detection over a manifest")
    common(p, "output directory for scores.csv and loops.csv", out_required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("setting1", "setting2"), default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--backend", choices=("fpfh", "external"), default=None)
    p.add_argument("--rank-by", choices=("overlap", "ron"), default=None)
    p.set_defaults(func=cmd_detect_loops)

    p = sub.add_parser("register-pair", help="overlap, RON and transform for two clouds")
    common(p, "also write the report to this file")
    p.add_argument("cloud_a", help="query cloud (.ply, .bin or .l3dd)")
    p.add_argument("cloud_b", help="candidate cloud (.ply, .bin or .l3dd)")
    p.set_defaults(func=cmd_register_pair)

    p = sub.add_parser("eval-pr", help="precision-recall curve from a score log")
    common(p, "write the PR CSV here (also printed)")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--score", choices=("overlap", "ron"), default="ron")
    p.set_defaults(func=cmd_eval_pr)

    p = sub.add_parser("eval-ate", help="ATE RMSE between two trajectories")
    common(p, "write the ATE report here (also printed)")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--max-dt", type=float, default=0.02)
    p.set_defaults(func=cmd_eval_ate)

    p = sub.add_parser("extract-fpfh", help="subsample a cloud and write FPFH descriptors as L3DD")
    common(p, "output .l3dd file", out_required=True)
    p.add_argument("cloud")
    p.set_defaults(func=cmd_extract_fpfh)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NoConsensus as exc:
        print(f"error: no consensus: {exc}", file=sys.stderr)
        return EXIT_NO_CONSENSUS
    except (InputError, PcloopError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
