from typing import List, Optional
import argparse
import json
import logging
import pathlib
import sys

import numpy as np
import torch

from .config import PipelineConfig, load_config
from .lib import CryoSamuError, dump_report, make_report, sha256sum
from .mapio import read_mrc, write_mrc
from .metrics import cc_report, fsc, rscc
from .net.inference import enhance_map
from .net.training import fit, load_pairs, prepare_pairs, save_pairs, train_toy
from .net.unet import init_model
from .net.weights import load_weights, save_weights
from .pooling import SOFTMAX_AXES, pool_embedding, read_embeddings, read_pooled, write_pooled
from .simulate import derive_params, simulate_map
from .structure import read_pdb
from .tiling import TilePlan, load_cubes, partition, plan_for, save_cubes, stitch
from .version import __version__
from .volume import AugmentConfig

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# argparse dests that name input files, checksummed at startup
INPUT_ARGS = ("pdb", "input", "map", "ref", "a", "b", "emb", "manifest", "like",
              "plan", "pairs", "embedding")

# argparse dests that override PipelineConfig fields
CONFIG_ARGS = ("resolution", "grid_interval", "embed_len", "cube_size", "core_size",
               "pad", "seed", "batch_size", "learning_rate", "percentile")


# ############################### Subcommands ############################### #

def _simulate(args, cfg: PipelineConfig) -> dict:
    structure = read_pdb(args.pdb)
    params = derive_params(cfg.resolution, cfg.grid_interval)
    grid = None
    if args.like:
        like = read_mrc(args.like)
        grid = like.with_data(np.zeros(like.shape))
    sim = simulate_map(structure, params, grid=grid)
    write_mrc(sim.map, args.out)
    logger.info(f"Wrote {sim.map.dims} simulated map to {args.out}")
    return {"out": str(args.out), "dims": list(sim.map.dims), "n_atoms": structure.n_atoms,
            "k": params.k, "theta": params.theta, "cutoff_radius": params.cutoff_radius}


def _pool(args, cfg: PipelineConfig) -> dict:
    embeddings = read_embeddings(args.emb, args.manifest)
    pooled = pool_embedding(embeddings, L=cfg.embed_len, softmax_axis=args.softmax_axis,
                            true_length=args.true_length, per_feature=args.per_feature)
    write_pooled(args.out, pooled)
    return {"out": str(args.out), "L": pooled.L, "d": int(pooled.E_final.shape[1])}


def _tile(args, cfg: PipelineConfig) -> dict:
    density = read_mrc(args.input)
    plan = plan_for(density, cfg.cube_size, cfg.core_size, cfg.pad)
    save_cubes(partition(density, plan), args.out_dir)
    return {"out_dir": str(args.out_dir), "n_cubes": len(plan)}


def _stitch(args, cfg: PipelineConfig) -> dict:
    plan = TilePlan.from_json(pathlib.Path(args.plan).read_text())
    density = stitch(load_cubes(args.cubes, plan), plan)
    write_mrc(density, args.out)
    return {"out": str(args.out), "dims": list(density.dims)}


def _enhance(args, cfg: PipelineConfig) -> dict:
    model = load_weights(args.weights)
    density = read_mrc(args.input)
    result = enhance_map(density, model, cfg, rescale=args.rescale)
    write_mrc(result.map, args.out)
    return {"out": str(args.out), "dims": list(result.map.dims),
            "n_cubes": len(result.plan), "scale": result.scale}


def _train_toy(args, cfg: PipelineConfig) -> dict:
    model, losses = train_toy(seed=cfg.seed, steps=args.steps, lr=args.lr)
    if args.out:
        save_weights(model, args.out)
    return {"steps": len(losses), "initial_loss": losses[0], "final_loss": losses[-1],
            "ratio": losses[-1] / losses[0] if losses[0] else None}


def _init_weights(args, cfg: PipelineConfig) -> dict:
    model = init_model(cfg.model, cfg.seed)
    save_weights(model, args.out)
    return {"out": str(args.out), "n_parameters": sum(p.numel() for p in model.parameters())}


def _prepare_pairs(args, cfg: PipelineConfig) -> dict:
    embedding = read_pooled(args.embedding) if args.embedding else None
    pairs = prepare_pairs(read_mrc(args.map), read_pdb(args.pdb), cfg, embedding)
    save_pairs(args.out, pairs)
    return {"out": str(args.out), "n_pairs": len(pairs)}


def _train(args, cfg: PipelineConfig) -> dict:
    pairs = load_pairs(args.pairs)
    model = load_weights(args.weights, cfg.model) if args.weights else None
    augmentation = AugmentConfig.light() if args.augment else None
    result = fit(pairs, cfg, steps=args.steps, eval_every=args.eval_every,
                 augmentation=augmentation, model=model)
    save_weights(result.model, args.out)
    return {"out": str(args.out), "steps": len(result.train_losses),
            "best_val": result.best_val, "final_train": result.train_losses[-1]}


def _eval_cc(args, cfg: PipelineConfig) -> dict:
    exp_map, ref_map = read_mrc(args.map), read_mrc(args.ref)
    structure = read_pdb(args.pdb) if args.pdb else None
    params = derive_params(cfg.resolution, cfg.grid_interval)
    report = cc_report(exp_map, ref_map, structure, params,
                       fraction=cfg.peak_fraction, v_atom=cfg.v_atom)
    return {"body": report.to_dict(), "text": report.to_text()}


def _eval_fsc(args, cfg: PipelineConfig) -> dict:
    curve = fsc(read_mrc(args.a), read_mrc(args.b))
    return {"body": curve.to_dict(), "text": curve.to_text()}


def _eval_rscc(args, cfg: PipelineConfig) -> dict:
    params = derive_params(cfg.resolution, cfg.grid_interval)
    report = rscc(read_mrc(args.map), read_pdb(args.pdb), params,
                  threshold=cfg.rscc_threshold, min_support=cfg.rscc_min_support,
                  reference=args.reference)
    return {"body": report.to_dict(), "text": report.to_text()}


# ################################# Parser ################################## #

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML (or JSON) pipeline configuration file.")
    common.add_argument("--seed", type=int, help="Global random seed.")
    common.add_argument("--threads", type=int, help="Cap on torch's intra-op threads.")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    common.add_argument("--json", action="store_true",
                        help="Write reports to stdout as JSON, not aligned text.")

    parser = argparse.ArgumentParser(
        prog="cryosamu",
        description="Structure-aware cryo-EM map enhancement.",
    )
    parser.add_argument("--version", action="version", version=f"cryosamu {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("simulate", parents=[common],
                       help="Simulate a density map from a PDB structure.")
    p.add_argument("--pdb", required=True, help="Input PDB file.")
    p.add_argument("--out", required=True, help="Output MRC file.")
    p.add_argument("--resolution", type=float, help="Resolution in A.")
    p.add_argument("--grid", dest="grid_interval", type=float, help="Grid interval in A.")
    p.add_argument("--like", help="Simulate on the grid of this MRC map.")
    p.set_defaults(func=_simulate)

    p = sub.add_parser("pool", parents=[common],
                       help="Pool per-chain embeddings into a fixed L x d matrix.")
    p.add_argument("--emb", required=True, help="Embedding blob or C x R x d .npy file.")
    p.add_argument("--manifest", help="JSON manifest describing the blob.")
    p.add_argument("--L", dest="embed_len", type=int, help="Number of output rows.")
    p.add_argument("--out", required=True, help="Output float32 blob.")
    p.add_argument("--softmax-axis", choices=sorted(SOFTMAX_AXES), default="row")
    p.add_argument("--true-length", action="store_true",
                   help="Average chains over their true lengths, not the padded length.")
    p.add_argument("--per-feature", action="store_true",
                   help="Min-max normalize every feature column separately.")
    p.set_defaults(func=_pool)

    p = sub.add_parser("tile", parents=[common], help="Cut a map into overlapping cubes.")
    p.add_argument("--in", dest="input", required=True, help="Input MRC map.")
    p.add_argument("--out-dir", required=True, help="Directory for plan.json and cubes.")
    p.add_argument("--cube-size", type=int)
    p.add_argument("--core-size", type=int)
    p.add_argument("--pad", type=int)
    p.set_defaults(func=_tile)

    p = sub.add_parser("stitch", parents=[common], help="Reassemble cubes into a map.")
    p.add_argument("--plan", required=True, help="plan.json written by tile.")
    p.add_argument("--cubes", required=True, help="Directory of cube_*.npy files.")
    p.add_argument("--out", required=True, help="Output MRC map.")
    p.set_defaults(func=_stitch)

    p = sub.add_parser("enhance", parents=[common], help="Enhance a map with trained weights.")
    p.add_argument("--in", dest="input", required=True, help="Input MRC map.")
    p.add_argument("--weights", required=True, help="Weights directory.")
    p.add_argument("--out", required=True, help="Output MRC map.")
    p.add_argument("--batch-size", type=int, help="Cubes per forward pass.")
    p.add_argument("--rescale", action="store_true",
                   help="Multiply the output by the input's normalization percentile.")
    p.set_defaults(func=_enhance)

    p = sub.add_parser("train-toy", parents=[common],
                       help="Overfit the toy U-Net on one synthetic pair.")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--out", help="Optional weights directory for the trained model.")
    p.set_defaults(func=_train_toy)

    p = sub.add_parser("init-weights", parents=[common],
                       help="Write seeded random weights for the configured model.")
    p.add_argument("--out", required=True, help="Weights directory.")
    p.set_defaults(func=_init_weights)

    p = sub.add_parser("prepare-pairs", parents=[common],
                       help="Cut an experimental map and its simulated target into cube pairs.")
    p.add_argument("--map", required=True, help="Experimental MRC map.")
    p.add_argument("--pdb", required=True, help="Fitted PDB structure.")
    p.add_argument("--embedding", help="Pooled embedding written by pool.")
    p.add_argument("--out", required=True, help="Output .npz archive.")
    p.set_defaults(func=_prepare_pairs)

    p = sub.add_parser("train", parents=[common], help="Train on prepared cube pairs.")
    p.add_argument("--pairs", required=True, nargs="+", help="One or more .npz archives.")
    p.add_argument("--out", required=True, help="Weights directory for the best model.")
    p.add_argument("--weights", help="Start from these weights.")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--augment", action="store_true", help="Noise, blur and anisotropy.")
    p.set_defaults(func=_train)

    p = sub.add_parser("eval-cc", parents=[common], help="Real-space correlations.")
    p.add_argument("--map", required=True, help="Map to evaluate.")
    p.add_argument("--ref", required=True, help="Reference map on the same grid.")
    p.add_argument("--pdb", help="Structure for CC_volume.")
    p.add_argument("--resolution", type=float)
    p.set_defaults(func=_eval_cc)

    p = sub.add_parser("eval-fsc", parents=[common], help="Fourier shell correlation.")
    p.add_argument("--a", required=True, help="First map.")
    p.add_argument("--b", required=True, help="Second map on the same grid.")
    p.set_defaults(func=_eval_fsc)

    p = sub.add_parser("eval-rscc", parents=[common], help="Per-residue real-space correlation.")
    p.add_argument("--map", required=True, help="Map to evaluate.")
    p.add_argument("--pdb", required=True, help="Structure fitted to the map.")
    p.add_argument("--resolution", type=float)
    p.add_argument("--reference", choices=("model", "residue"), default="model")
    p.set_defaults(func=_eval_rscc)

    return parser


def _log_run(args, cfg: PipelineConfig, sources: dict):
    logger.info(f"cryosamu {__version__}: {args.command}")
    logger.info(f"seed {cfg.seed}, config sha256 {cfg.digest()}")
    for key, source in sorted(sources.items()):
        logger.info(f"config {key} = {getattr(cfg, key)!r} from {source}")
    for name in INPUT_ARGS:
        value = getattr(args, name, None)
        for path in (value if isinstance(value, list) else [value]):
            if path and pathlib.Path(path).is_file():
                logger.info(f"input {name} {path} sha256 {sha256sum(path)}")


def _fail(category: str, message: str, code: int) -> int:
    logger.error(message)
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return code


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    logging.basicConfig(format=LOG_FORMAT)
    logging.getLogger("cryosamu").setLevel(logging.DEBUG if args.verbose else logging.INFO)

    try:
        overrides = {name: getattr(args, name, None) for name in CONFIG_ARGS}
        cfg, sources = load_config(args.config, overrides)
        if args.threads:
            torch.set_num_threads(args.threads)
        torch.manual_seed(cfg.seed)
        _log_run(args, cfg, sources)

        result = args.func(args, cfg)
    except CryoSamuError as e:
        return _fail(e.category, str(e), e.exit_code)
    except OSError as e:
        return _fail("io", str(e), 2)

    if "text" in result:
        if args.json:
            dump_report(make_report(args.command, result["body"]))
        else:
            sys.stdout.write(result["text"])
    elif args.json:
        dump_report(make_report(args.command, result))
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
