import pytest


def pytest_collection_modifyitems(config, items):
    """Mirror core.test_runner: leave out @tag("acceptance") tests unless RUN_ACCEPTANCE is set."""
    from django.conf import settings

    if settings.RUN_ACCEPTANCE:
        return
    skip = pytest.mark.skip(reason="acceptance test; set RUN_ACCEPTANCE=1")
    for item in items:
        tags = set(getattr(getattr(item, "cls", None), "tags", ()))
        tags |= set(getattr(getattr(item, "function", None), "tags", ()))
        if "acceptance" in tags:
            item.add_marker(skip)
