import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from discorag.corpus import Document  # noqa: E402
from discorag.llm import LlmClient, MockBackend  # noqa: E402
from discorag.synthetic import make_corpus, write_corpus  # noqa: E402

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] AC{number:02d} {detail}")


@pytest.fixture(scope="session")
def synthetic():
    docs, queries = make_corpus(n_docs=20, seed=13)
    return [Document(d["doc_id"], d["text"], d["lang"]) for d in docs], queries


@pytest.fixture
def corpus_dir(tmp_path):
    write_corpus(tmp_path, n_docs=20, seed=13)
    return tmp_path


@pytest.fixture
def mock_client():
    return LlmClient({"mock": MockBackend()})
