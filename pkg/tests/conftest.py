import pytest
import torch

torch.set_num_threads(1)

from mbrec.config import resolve_config
from mbrec.data import Dataset, SyntheticManifest, SyntheticSpec, gen_synthetic
from mbrec.pipeline import SplitData, train_all

TINY_OVERRIDES = {
    "data.L": "12",
    "model.d": "16",
    "model.heads": "2",
    "train.batch": "64",
    "train.epochs1": "8",
    "train.epochs2": "8",
    "train.epochs3": "3",
    "diffusion.T": "40",
    "diffusion.stride": "10",
    "train.seed": "7",
}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A small planted dataset shared across the suite."""
    tmp = tmp_path_factory.mktemp("tinydata")
    spec = SyntheticSpec(
        num_users=60, num_items=40, num_behaviors=4, archetypes=2,
        cluster_size=5, behavior_frequencies=(0.7, 0.1, 0.1, 0.1),
        seq_len_range=(6, 12), seed=7)
    data_path, manifest_path = gen_synthetic(spec, tmp / "tiny.tsv")
    dataset = Dataset.load(data_path, min_interactions=2)
    return {
        "spec": spec,
        "path": data_path,
        "dataset": dataset,
        "manifest": SyntheticManifest.load(manifest_path),
    }


@pytest.fixture(scope="session")
def tiny_conf():
    return resolve_config(overrides=TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_split(tiny_data, tiny_conf):
    return SplitData.from_dataset(tiny_data["dataset"], tiny_conf["data.L"])


@pytest.fixture(scope="session")
def tiny_bundle(tiny_split, tiny_conf):
    """A fully trained (if briefly) bundle on the tiny dataset."""
    return train_all(tiny_split, tiny_conf)
