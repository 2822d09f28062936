import pytest

from trajrisk.datagen import GeneratorConfig, generate_dataset


@pytest.fixture(scope="session")
def small_pairs():
    return list(generate_dataset(GeneratorConfig(n_users=300, seed=7)))


@pytest.fixture(scope="session")
def label_rows_5000():
    return [labels for _, labels in generate_dataset(GeneratorConfig(n_users=5000, seed=42))]


@pytest.fixture(scope="session")
def small_tokenized(small_pairs):
    from trajrisk.preprocess import TrajectoryTokenizer

    tok = TrajectoryTokenizer().fit(small_pairs)
    return tok, tok.transform(small_pairs)
