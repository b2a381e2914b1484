import pytest

from passageqa.retriever import build_index

from synthtask import build_task


@pytest.fixture(scope="session")
def task():
    """Shared synthetic QA task; treat as read-only."""
    return build_task(seed=0)


@pytest.fixture(scope="session")
def task_index(task):
    return build_index(task.corpus)
