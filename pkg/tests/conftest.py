import pathlib

import pytest
import torch

from msp_dst.corpus import Schema, SlotDef
from msp_dst.generator import GeneratorConfig, generate_synthetic_corpus
from msp_dst.training import load_corpus_dir

torch.set_num_threads(max(1, torch.get_num_threads()))

DATA_DIR = pathlib.Path(__file__).resolve().parent.parent / "src" / "msp_dst" / "data"


@pytest.fixture(scope="session")
def mini_schema_path() -> pathlib.Path:
    return DATA_DIR / "multiwoz_mini_schema.json"


@pytest.fixture(scope="session")
def mini_dialogues_path() -> pathlib.Path:
    return DATA_DIR / "multiwoz_mini_dialogues.jsonl"


@pytest.fixture()
def tiny_schema() -> Schema:
    """Two-domain four-slot schema for head/pool unit tests."""
    return Schema([
        SlotDef("train-day", "train", "categorical",
                ("monday", "tuesday", "friday"), ("restaurant-day",)),
        SlotDef("train-people", "train", "span", (), ()),
        SlotDef("restaurant-day", "restaurant", "categorical",
                ("monday", "tuesday", "friday"), ("train-day",)),
        SlotDef("restaurant-name", "restaurant", "span", (), ()),
    ])


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 150-dialogue synthetic corpus shared across tests."""
    out = tmp_path_factory.mktemp("small-corpus")
    generate_synthetic_corpus(GeneratorConfig(n_dialogues=150), seed=11, out_dir=out)
    return load_corpus_dir(out)
