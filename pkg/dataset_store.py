#!/usr/bin/env python3
"""
Dataset Store
Writes a synthetic dataset to disk (one AER file per sequence + manifest.csv)
and imports it back; output directories are promoted atomically
"""

import os
import shutil
import tempfile
from contextlib import contextmanager
from typing import Iterator, List, Optional

import pandas as pd
from loguru import logger

from event_core import FrameSequence, bin_events, read_aer, read_aer_geometry, sequence_to_events, write_aer
from pipeline_errors import ConfigurationError
from scene_synth import SyntheticDataset

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["sequence_id", "file", "split", "seed", "n_frames", "dt"]


@contextmanager
def atomic_output_dir(final_dir: str) -> Iterator[str]:
    """Yield a temp sibling directory; it replaces final_dir only if the block succeeds"""
    parent = os.path.dirname(os.path.abspath(final_dir)) or "."
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"Cannot create output parent {parent}: {e}") from e
    staging = tempfile.mkdtemp(prefix=".staging-", dir=parent)
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if os.path.exists(final_dir):
        shutil.rmtree(final_dir)
    os.replace(staging, final_dir)


@contextmanager
def atomic_output_files(final_dir: str) -> Iterator[str]:
    """Like atomic_output_dir, but moves each staged file into final_dir and keeps its other files"""
    os.makedirs(final_dir, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".staging-", dir=final_dir)
    try:
        yield staging
        for name in sorted(os.listdir(staging)):
            os.replace(os.path.join(staging, name), os.path.join(final_dir, name))
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def write_dataset(dataset: SyntheticDataset, out_dir: str) -> pd.DataFrame:
    """Write every sequence as AER text and describe them in manifest.csv"""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    # sequence ids interleave the splits back into generation order
    for split, sequences, seeds in (
        ("train", dataset.train, dataset.train_seeds),
        ("test", dataset.test, dataset.test_seeds),
    ):
        for i, sequence in enumerate(sequences):
            sequence_id = 2 * i if split == "train" else 2 * i + 1
            filename = f"seq_{sequence_id:05d}.aer"
            write_aer(sequence_to_events(sequence), os.path.join(out_dir, filename), sequence.geometry)
            rows.append({
                "sequence_id": sequence_id,
                "file": filename,
                "split": split,
                "seed": seeds[i] if i < len(seeds) else "",
                "n_frames": len(sequence),
                "dt": sequence.dt,
            })

    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS).sort_values("sequence_id").reset_index(drop=True)
    manifest.to_csv(os.path.join(out_dir, MANIFEST_NAME), index=False)
    logger.info(f"Wrote {len(manifest)} sequences to {out_dir}")
    return manifest


def load_sequence(path: str, dt: int, n_frames: Optional[int] = None) -> FrameSequence:
    geometry = read_aer_geometry(path)
    t_end = n_frames * dt if n_frames is not None else None
    return bin_events(read_aer(path), 0, dt, geometry, t_end=t_end)


def load_dataset(data_dir: str, dt: Optional[int] = None) -> SyntheticDataset:
    """Import a dataset written by write_dataset"""
    manifest_path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise ConfigurationError(f"Dataset manifest not found: {manifest_path}")

    manifest = pd.read_csv(manifest_path)
    dataset = SyntheticDataset(train=[], test=[])
    for row in manifest.sort_values("sequence_id").itertuples(index=False):
        sequence = load_sequence(os.path.join(data_dir, row.file), int(dt or row.dt), int(row.n_frames))
        seed = int(row.seed) if str(row.seed) != "nan" and row.seed != "" else 0
        if row.split == "train":
            dataset.train.append(sequence)
            dataset.train_seeds.append(seed)
        else:
            dataset.test.append(sequence)
            dataset.test_seeds.append(seed)
    logger.info(f"Loaded {len(dataset.train)} train / {len(dataset.test)} test sequences from {data_dir}")
    return dataset


def list_sequence_files(data_dir: str, split: Optional[str] = None) -> List[str]:
    manifest = pd.read_csv(os.path.join(data_dir, MANIFEST_NAME))
    if split is not None:
        manifest = manifest[manifest["split"] == split]
    return [os.path.join(data_dir, f) for f in manifest["file"]]
