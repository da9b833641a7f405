"""
Interface de linha de comando ``degm``.

Verbos: train, eval, diagnose, export-v, ablate, gen-synthetic.
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from .config import ExperimentConfig, apply_desk_scale, load_config
from .core.errors import DegmError
from .core.nnkit import Rng
from .engine import ExperimentEngine
from .layers.data import SYNTHETIC_KINDS, synthetic_task, to_idx_images, write_idx

logger = logging.getLogger(__name__)

DEFAULT_ABLATIONS = ['degm', 'degm-1', 'degm-2', 'degm-4', 'degm-5', 'degm-6', 'degm-7']


def _prepare(cfg: ExperimentConfig, seed: Optional[int], desk_scale: bool) -> ExperimentConfig:
    if seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    if desk_scale:
        cfg = apply_desk_scale(cfg)
    return cfg


def cmd_train(cfg: ExperimentConfig, out: Optional[str] = None) -> Dict[str, Any]:
    """Treina conforme o modo e grava os artefatos em <out>/<config-hash>/."""
    engine = ExperimentEngine(cfg, out_dir=out)
    summary = engine.train()
    logger.info("artifacts written to %s", engine.run_dir)
    return summary


def cmd_eval(run_dir: str, kprime: Optional[int] = None) -> pd.DataFrame:
    """Tabela de métricas por tarefa do checkpoint em ``run_dir``."""
    return ExperimentEngine.from_run_dir(run_dir).evaluate(kprime)


def cmd_diagnose(run_dir: str) -> Dict[str, Path]:
    return ExperimentEngine.from_run_dir(run_dir).diagnose()


def cmd_export_v(run_dir: str, path: Optional[str] = None) -> Path:
    return ExperimentEngine.from_run_dir(run_dir).export_v(path)


def cmd_ablate(cfg: ExperimentConfig, out: Optional[str] = None) -> Dict[str, Any]:
    cfg = dataclasses.replace(cfg, mode='ablation', ablations=cfg.ablations or list(DEFAULT_ABLATIONS))
    return cmd_train(cfg, out)


def cmd_gen_synthetic(kind: str, n: int, dim: int, seed: int, out: str) -> Path:
    """Grava uma tarefa sintética como arquivo IDX de imagens."""
    data = synthetic_task(kind, n, dim, Rng(seed))
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    target = path / f"{kind}-{n}x{dim}-seed{seed}-images.idx"
    write_idx(target, to_idx_images(data))
    logger.info("wrote %d %s samples to %s", n, kind, target)
    return target


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='degm', description='Lifelong generative modelling lab (DEGM)')
    parser.add_argument('--log-level', default=os.environ.get('DEGM_LOG_LEVEL', 'INFO'))
    sub = parser.add_subparsers(dest='command', required=True)

    def add_run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument('--config', required=True, help='JSON configuration file')
        p.add_argument('--seed', type=int, default=None)
        p.add_argument('--out', default=os.environ.get('DEGM_RUNS_DIR'))
        p.add_argument('--desk-scale', action='store_true')

    add_run_flags(sub.add_parser('train', help='run the configured experiment'))
    add_run_flags(sub.add_parser('ablate', help='compare edge-policy variants'))

    for verb in ('eval', 'diagnose', 'export-v'):
        p = sub.add_parser(verb)
        p.add_argument('--run', default=None, help='run directory (runs/<config-hash>)')
        p.add_argument('--config', default=None, help='locate the run from its configuration')
        p.add_argument('--seed', type=int, default=None)
        p.add_argument('--out', default=os.environ.get('DEGM_RUNS_DIR'))
        p.add_argument('--desk-scale', action='store_true')
        if verb == 'eval':
            p.add_argument('--kprime', type=int, default=None)
        if verb == 'export-v':
            p.add_argument('--path', default=None)

    gen = sub.add_parser('gen-synthetic', help='write a synthetic task as IDX')
    gen.add_argument('--kind', required=True, choices=SYNTHETIC_KINDS)
    gen.add_argument('--n', type=int, default=1000)
    gen.add_argument('--dim', type=int, default=64)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--out', default='data/synthetic')
    return parser


def _run_dir(args: argparse.Namespace) -> str:
    if args.run:
        return args.run
    if not args.config:
        raise DegmError("either --run or --config is required")
    cfg = _prepare(load_config(args.config), args.seed, args.desk_scale)
    return str(ExperimentEngine(cfg, out_dir=args.out).run_dir)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    progress = os.environ.get('DEGM_PROGRESS', '').lower() in ('1', 'true', 'yes')
    try:
        if args.command in ('train', 'ablate'):
            cfg = _prepare(load_config(args.config), args.seed, args.desk_scale)
            if progress:
                cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, progress=True))
            summary = (cmd_train if args.command == 'train' else cmd_ablate)(cfg, args.out)
            print(summary['config_hash'])
        elif args.command == 'eval':
            print(cmd_eval(_run_dir(args), args.kprime).to_string(index=False))
        elif args.command == 'diagnose':
            for name, path in cmd_diagnose(_run_dir(args)).items():
                print(f"{name}: {path}")
        elif args.command == 'export-v':
            print(cmd_export_v(_run_dir(args), args.path))
        else:
            print(cmd_gen_synthetic(args.kind, args.n, args.dim, args.seed, args.out))
    except (DegmError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
