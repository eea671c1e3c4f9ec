import numpy as np
import pytest

from vlattack.backend import ToyBackend, ToyConfig
from vlattack.core import AttackConfig, ImageSample, load_manifest
from vlattack.fixture import make_fixture
from vlattack.lexicon import StaticSynonyms, load_vectors
from vlattack.pipeline import attack_pairs, evaluate_records
from vlattack.text_attack import Lexicon


@pytest.fixture(scope="session")
def toy():
    return ToyBackend(ToyConfig(vocab=("a", "red", "dog", "runs", "cat", "blue")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=8, channels=3, image_id="img", dtype=np.float32):
    return ImageSample(image_id, rng.uniform(0, 1, (size, size, channels)).astype(dtype))


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("toyfx"), size=32, seed=7)


@pytest.fixture(scope="session")
def fixture_data(fixture_dir):
    pairs = load_manifest(fixture_dir / "manifest.jsonl")
    backend = ToyBackend.load(fixture_dir / "toy.bin")
    lexicon = Lexicon(load_vectors(fixture_dir / "vectors.txt"),
                      StaticSynonyms.load(fixture_dir / "synonyms.json"))
    return pairs, backend, lexicon


class Runs:
    """Memoized pipeline runs on the committed fixture, keyed by config overrides."""

    def __init__(self, data):
        self.pairs, self.backend, self.lexicon = data
        self._cache = {}

    def __call__(self, **overrides):
        key = tuple(sorted((k, tuple(v) if isinstance(v, (list, tuple, set, frozenset)) else v)
                           for k, v in overrides.items()))
        if key not in self._cache:
            cfg = AttackConfig(**overrides)
            records = attack_pairs(self.pairs, self.backend, self.lexicon, cfg)
            report = evaluate_records(self.pairs, records, self.backend, cfg)
            self._cache[key] = (cfg, records, report)
        return self._cache[key]


@pytest.fixture(scope="session")
def runs(fixture_data):
    return Runs(fixture_data)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
