import pytest

from cgfuzz import corpus, extract


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("work")
    corpus.write_corpus(root, seed_count=200)
    return root


@pytest.fixture(scope="session")
def seeds():
    return {f"seed-{i:04d}": corpus.gen_seed(corpus.seed_rng(0, i)) for i in range(200)}


@pytest.fixture(scope="session")
def pairs(workdir):
    return extract.collect_pairs(workdir / "corpus" / "opt")


@pytest.fixture(scope="session")
def pool(workdir):
    return extract.extract_corpus(workdir, extract.ADAPTIVE)
