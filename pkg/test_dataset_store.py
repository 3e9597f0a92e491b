import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from dataset_store import (
    MANIFEST_COLUMNS,
    atomic_output_dir,
    atomic_output_files,
    list_sequence_files,
    load_dataset,
    write_dataset,
)
from pipeline_errors import ConfigurationError


def test_write_then_load_gives_the_same_frames(tmp_path, tiny_dataset):
    out = str(tmp_path / "data")
    manifest = write_dataset(tiny_dataset, out)
    assert list(manifest.columns) == MANIFEST_COLUMNS
    assert manifest["sequence_id"].tolist() == [0, 1, 2, 3]
    assert manifest["split"].tolist() == ["train", "test", "train", "test"]

    loaded = load_dataset(out)
    for a, b in zip(tiny_dataset.train + tiny_dataset.test, loaded.train + loaded.test):
        assert np.array_equal(a.as_array(), b.as_array())
        assert a.dt == b.dt
    assert loaded.train_seeds == tiny_dataset.train_seeds
    assert len(list_sequence_files(out, "test")) == 2


def test_manifest_on_disk(tmp_path, tiny_dataset):
    out = str(tmp_path / "data")
    write_dataset(tiny_dataset, out)
    manifest = pd.read_csv(os.path.join(out, "manifest.csv"))
    assert (manifest["n_frames"] == 8).all()
    assert all(os.path.exists(os.path.join(out, f)) for f in manifest["file"])


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset(str(tmp_path))


def test_atomic_dir_replaces_only_on_success(tmp_path):
    final = tmp_path / "out"
    with atomic_output_dir(str(final)) as staging:
        Path(staging, "a.txt").write_text("one")
    assert (final / "a.txt").read_text() == "one"

    with pytest.raises(RuntimeError):
        with atomic_output_dir(str(final)) as staging:
            Path(staging, "b.txt").write_text("two")
            raise RuntimeError("interrupted")
    assert sorted(os.listdir(final)) == ["a.txt"]
    assert not [n for n in os.listdir(tmp_path) if n.startswith(".staging-")]


def test_atomic_files_keep_existing_files(tmp_path):
    final = tmp_path / "ckpt"
    final.mkdir()
    (final / "old.txt").write_text("keep")
    with atomic_output_files(str(final)) as staging:
        Path(staging, "new.txt").write_text("fresh")
    assert sorted(os.listdir(final)) == ["new.txt", "old.txt"]

    with pytest.raises(RuntimeError):
        with atomic_output_files(str(final)) as staging:
            Path(staging, "partial.txt").write_text("x")
            raise RuntimeError("interrupted")
    assert sorted(os.listdir(final)) == ["new.txt", "old.txt"]
