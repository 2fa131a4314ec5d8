"""Seeded synthetic tasks with a known generating formula.

Each task pairs a dataset with a matching knowledge base so searches can be
checked against the formula that produced the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg_store import KnowledgeBase, map_columns, parse_kg_text
from .tabular import Column, Dataset

BODY_KG = """
concept Mass
concept Length
concept Age
unit kilogram dim mass
unit metre dim length
unit year dim time
map weight -> concept:Mass unit:kilogram
map height -> concept:Length unit:metre
map age -> concept:Age unit:year
# a squared length is an area, as plain to read as a product
interp_weight square 0.95
"""

RETAIL_KG = """
concept Price
concept Quantity
concept Stock
concept Store
unit euro dim currency
unit item dim count
map price -> concept:Price unit:euro
map quantity -> concept:Quantity unit:item
map stock -> concept:Stock unit:item
map store -> concept:Store
noninterp add when units_differ
noninterp sub when units_differ
noninterp class:agg when concept_is(Stock)
"""


@dataclass(frozen=True)
class SyntheticTask:
    name: str
    dataset: Dataset
    kb: KnowledgeBase
    formula: str


def _noisy(signal: np.ndarray, rel_sigma: float, rng: np.random.Generator) -> np.ndarray:
    return signal + rng.normal(0.0, rel_sigma * signal.std(), size=signal.shape)


def _dataset(cols: dict[str, np.ndarray], target: str, task: str, kb: KnowledgeBase) -> Dataset:
    columns = []
    for name, v in cols.items():
        if v.dtype == object:
            columns.append(Column(name, "categorical", v))
        else:
            columns.append(Column(name, "numeric", v.astype(np.float64)))
    return map_columns(kb, Dataset(tuple(columns), target, task))


def bmi_task(n: int = 1000, seed: int = 0, rel_sigma: float = 0.02) -> SyntheticTask:
    """Target is weight / height**2 plus Gaussian noise at ``rel_sigma`` of the signal std."""
    rng = np.random.default_rng(seed)
    weight = rng.uniform(40.0, 140.0, n)
    height = rng.uniform(1.0, 2.2, n)
    age = rng.uniform(18.0, 80.0, n)
    bmi = _noisy(weight / height ** 2, rel_sigma, rng)
    kb = parse_kg_text(BODY_KG, "<body>")
    d = _dataset({"weight": weight, "height": height, "age": age, "bmi": bmi}, "bmi", "regression", kb)
    return SyntheticTask("bmi", d, kb, "div(weight,square(height))")


def revenue_task(n: int = 600, seed: int = 0, rel_sigma: float = 0.05) -> SyntheticTask:
    """Target is sales value per stocked item, price * quantity / stock.

    Sums of stock with sales-like columns are flagged by the knowledge base.
    """
    rng = np.random.default_rng(seed)
    price = rng.uniform(2.0, 20.0, n)
    quantity = rng.uniform(5.0, 50.0, n)
    stock = rng.uniform(10.0, 100.0, n)
    store = np.array([f"s{i}" for i in rng.integers(0, 6, n)], dtype=object)
    y = _noisy(price * quantity / stock, rel_sigma, rng)
    kb = parse_kg_text(RETAIL_KG, "<retail>")
    d = _dataset({"price": price, "quantity": quantity, "stock": stock, "store": store, "turnover": y},
                 "turnover", "regression", kb)
    return SyntheticTask("revenue", d, kb, "div(mul(price,quantity),stock)")


def obesity_task(n: int = 600, seed: int = 0) -> SyntheticTask:
    """Binary target: body mass index above 30."""
    rng = np.random.default_rng(seed)
    weight = rng.uniform(40.0, 140.0, n)
    height = rng.uniform(1.4, 2.1, n)
    age = rng.uniform(18.0, 80.0, n)
    bmi = weight / height ** 2 + rng.normal(0.0, 0.5, n)
    label = np.where(bmi > 30.0, "obese", "not_obese").astype(object)
    kb = parse_kg_text(BODY_KG, "<body>")
    d = _dataset({"weight": weight, "height": height, "age": age, "obese": label},
                 "obese", "classification", kb)
    return SyntheticTask("obesity", d, kb, "div(weight,square(height))")


def toy_task(n: int = 300, seed: int = 0) -> SyntheticTask:
    """Three numeric features, target driven by the product of two of them."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(1.0, 3.0, n)
    b = rng.uniform(1.0, 3.0, n)
    c = rng.uniform(1.0, 3.0, n)
    y = _noisy(a * b, 0.05, rng)
    kb = parse_kg_text("concept Signal\nmap a -> concept:Signal\nmap b -> concept:Signal\n", "<toy>")
    d = _dataset({"a": a, "b": b, "c": c, "y": y}, "y", "regression", kb)
    return SyntheticTask("toy", d, kb, "mul(a,b)")


def suite(seed: int = 0) -> list[SyntheticTask]:
    return [bmi_task(n=600, seed=seed), revenue_task(seed=seed), obesity_task(seed=seed)]


CITY_CENTRES = {
    "Paris": (48.8566, 2.3522),
    "Lyon": (45.7640, 4.8357),
    "Marseille": (43.2965, 5.3698),
    "Bordeaux": (44.8378, -0.5792),
    "Lille": (50.6292, 3.0573),
}

TRIP_SCHEMA = {
    "start_datetime": {"dtype": "datetime"},
    "start_lat": {"dtype": "geo_lat"},
    "start_lon": {"dtype": "geo_lon"},
    "end_lat": {"dtype": "geo_lat"},
    "end_lon": {"dtype": "geo_lon"},
    "member": {"dtype": "boolean"},
}


def trip_rows(n: int = 400, seed: int = 7) -> list[dict[str, str]]:
    """Bike-share style rides; duration follows distance, slowed at rush hour."""
    from .tabular import format_datetime

    rng = np.random.default_rng(seed)
    cities = sorted(CITY_CENTRES)
    start0 = 1_680_307_200  # 2023-04-01T00:00:00Z
    rows = []
    for _ in range(n):
        city = cities[rng.integers(len(cities))]
        lat0, lon0 = CITY_CENTRES[city]
        slat, slon = lat0 + rng.normal(0, 0.02), lon0 + rng.normal(0, 0.03)
        elat, elon = slat + rng.normal(0, 0.02), slon + rng.normal(0, 0.03)
        ts = start0 + int(rng.integers(0, 90 * 86400) // 60 * 60)
        hour = (ts % 86400) // 3600
        rush = 7 <= hour < 10 or 16 <= hour < 19
        km = 6371.0 * 2 * np.arcsin(np.sqrt(
            np.sin(np.radians(elat - slat) / 2) ** 2
            + np.cos(np.radians(slat)) * np.cos(np.radians(elat)) * np.sin(np.radians(elon - slon) / 2) ** 2))
        member = rng.random() < 0.6
        speed = (11.0 if rush else 16.0) * (1.1 if member else 1.0)
        minutes = km / speed * 60.0 + 2.0 + rng.normal(0, 1.0)
        rows.append({
            "start_datetime": format_datetime(float(ts)),
            "start_lat": f"{slat:.5f}", "start_lon": f"{slon:.5f}",
            "end_lat": f"{elat:.5f}", "end_lon": f"{elon:.5f}",
            "city": city,
            "temperature": f"{rng.normal(15, 6):.1f}",
            "member": "1" if member else "0",
            "duration_min": f"{max(minutes, 1.0):.2f}",
        })
    return rows
