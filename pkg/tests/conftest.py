import time

SESSION_START = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    # Acceptance runs last so its wall-clock check covers the whole suite.
    def key(item):
        name = item.nodeid
        return ("test_acceptance" in name, "criterion_9" in name)
    items.sort(key=key)
