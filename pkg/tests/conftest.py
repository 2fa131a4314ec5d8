import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kgfe.kg_store import load_demo_kg, map_columns, parse_kg_text
from kgfe.tabular import Column, Dataset

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def demo_kb():
    return load_demo_kg()


@pytest.fixture
def unit_kb():
    return parse_kg_text("""
concept Mass
concept Length
concept Price
concept Stock
concept Store
unit kilogram dim mass
unit metre dim length
unit euro dim currency
unit item dim count
map weight -> concept:Mass unit:kilogram
map height -> concept:Length unit:metre
map price -> concept:Price unit:euro
map tax -> concept:Price unit:euro
map stock -> concept:Stock unit:item
map store -> concept:Store
noninterp add when units_differ
noninterp class:agg when concept_is(Stock)
""")


@pytest.fixture
def body(unit_kb):
    rng = np.random.default_rng(3)
    n = 120
    weight = rng.uniform(50, 110, n)
    height = rng.uniform(1.5, 2.0, n)
    d = Dataset((Column("weight", "numeric", weight), Column("height", "numeric", height),
                 Column("bmi", "numeric", weight / height ** 2)), "bmi", "regression")
    return map_columns(unit_kb, d)
