"""Call counters for the optional pipeline stages (fusion, band screening, boundary loss)."""
from collections import Counter

counters: Counter = Counter()


def hit(key):
    counters[key] += 1


def reset():
    counters.clear()
