import json
import random

import httpx
import numpy as np
import pytest
from oracles import brute_nearest, brute_rank

from dlcrec import grounding
from dlcrec.data import Item, ItemCatalog
from dlcrec.errors import CatalogTooSmall, DimensionMismatch, EmptyIndex, ProviderFailure
from dlcrec.grounding import Grounder, ItemIndex, NgramEmbedder


def typo(rng: random.Random, title: str) -> str:
    chars = list(title)
    for _ in range(rng.randint(0, 4)):
        i = rng.randrange(len(chars))
        op = rng.random()
        if op < 0.4:
            chars[i] = rng.choice("abcdefghijklmnopqrstuvwxyz ")
        elif op < 0.7:
            del chars[i]
        else:
            chars.insert(i, rng.choice("abcdefghijklmnopqrstuvwxyz"))
    text = "".join(chars)
    return text.upper() if rng.random() < 0.1 else text


def test_embedder_properties():
    emb = NgramEmbedder()
    v = emb.embed(["Heat (1995)", "heat  (1995)", "Big (1988)"])
    assert v.shape == (3, 512)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
    assert np.array_equal(v[0], v[1])  # case and whitespace folded
    assert not np.array_equal(v[0], v[2])
    assert emb.embed([]).shape == (0, 512)
    assert emb.fingerprint == "local_ngram:n=3:dim=512:crc32"


def test_nearest_matches_exhaustive_scan(catalog, grounder):
    rng = random.Random(0)
    ids = grounder.index.item_ids
    for _ in range(1000):
        query = typo(rng, catalog.title(rng.choice(ids)))
        q = grounder.provider.embed([query])[0]
        item, dist = grounder.ground_item(query)
        expected = brute_nearest(grounder.index.vectors, q)
        assert item == ids[expected]
        assert dist == pytest.approx(np.linalg.norm(grounder.index.vectors[expected] - q), abs=1e-12)


def test_exact_titles_ground_at_zero(catalog, grounder):
    for item_id in catalog.ids()[:200]:
        got, dist = grounder.ground_item(catalog.title(item_id))
        assert got == item_id and dist == 0.0


def twin_catalog():
    return ItemCatalog([
        Item("12", "Twin Peaks (1990)", ("Drama",)),
        Item("3", "Twin Peaks (1990)", ("Mystery",)),
        Item("7", "Other Movie (2001)", ("Comedy",)),
    ])


def test_ties_go_to_lowest_item_id():
    provider = NgramEmbedder()
    g = Grounder(grounding.build_index(twin_catalog(), provider), provider)
    assert g.index.item_ids == ["3", "7", "12"]
    assert g.ground_item("Twin Peaks (1990)") == ("3", 0.0)
    items, report = g.ground_list(["Twin Peaks (1990)", "Twin Peaks (1990)"])
    assert items == ["3", "12"]
    assert [s.rank_used for s in report.slots] == [1, 2]
    assert report.slots[1].l2_distance == 0.0
    assert report.dedupe_events == [1]


def test_rank_matches_full_ordering(catalog, grounder):
    rng = random.Random(3)
    vecs = grounder.index.vectors
    for _ in range(50):
        title = catalog.title(rng.choice(catalog.ids()))
        titles = [typo(rng, title) for _ in range(10)]
        items, report = grounder.ground_list(titles)
        assert len(set(items)) == 10
        used = set()
        for slot, t in zip(report.slots, titles):
            q = grounder.provider.embed([t])[0]
            row = brute_nearest(vecs, q, exclude=used)
            assert grounder.index.item_ids[row] == slot.matched_item_id
            assert slot.rank_used == brute_rank(vecs, q, row, used)
            used.add(row)


def test_dedupe_can_be_disabled(catalog, grounder):
    title = catalog.title(catalog.ids()[0])
    items, report = grounder.ground_list([title] * 10, dedupe=False)
    assert items == [catalog.ids()[0]] * 10 and report.dedupe_events == []


def test_catalog_too_small():
    provider = NgramEmbedder()
    g = Grounder(grounding.build_index(twin_catalog(), provider), provider)
    with pytest.raises(CatalogTooSmall):
        g.ground_list(["x"] * 4)
    assert len(g.ground_list(["x"] * 4, dedupe=False)[0]) == 4


def test_empty_index():
    provider = NgramEmbedder()
    g = Grounder(ItemIndex([], np.zeros((0, 512)), provider.fingerprint), provider)
    with pytest.raises(EmptyIndex):
        g.ground_item("x")
    with pytest.raises(EmptyIndex):
        g.ground_list(["x"])


def test_index_save_load(tmp_path, catalog):
    provider = NgramEmbedder()
    path = tmp_path / "idx.npz"
    built = grounding.build_index(catalog, provider, path)
    loaded = ItemIndex.load(path, provider)
    assert loaded.item_ids == built.item_ids and np.array_equal(loaded.vectors, built.vectors)
    with pytest.raises(DimensionMismatch):
        ItemIndex.load(path, NgramEmbedder(dimension=256))
    with pytest.raises(DimensionMismatch):
        Grounder(loaded, NgramEmbedder(dimension=256))


def test_load_or_build_rebuilds_for_new_catalog(tmp_path, catalog):
    provider = NgramEmbedder()
    path = tmp_path / "idx.npz"
    grounding.load_or_build_index(twin_catalog(), provider, path)
    index = grounding.load_or_build_index(catalog, provider, path)
    assert len(index) == len(catalog)


def test_index_validation():
    with pytest.raises(ValueError):
        ItemIndex(["1"], np.zeros((2, 3)), "f")
    with pytest.raises(ValueError):
        ItemIndex(["1"], np.array([[np.nan, 0.0]]), "f")


def test_report_dict():
    slot = grounding.GroundedSlot("raw", "3", 0.5, 2)
    rep = grounding.GroundingReport([slot], [0])
    assert rep.to_dict() == {
        "slots": [{"raw_title": "raw", "matched_item_id": "3", "l2_distance": 0.5, "rank_used": 2}],
        "dedupe_events": [0],
    }


# -- remote embeddings -----------------------------------------------------------


def remote(handler, dimension=3):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return grounding.RemoteEmbedder("http://e/v1", "emb", dimension, client=client, batch_size=2)


def test_remote_embedder_batches_and_orders():
    seen = []

    def handler(request):
        texts = json.loads(request.content)["input"]
        seen.append(texts)
        data = [{"index": i, "embedding": [float(len(t)), 0.0, 1.0]} for i, t in enumerate(texts)][::-1]
        return httpx.Response(200, json={"data": data})

    out = remote(handler).embed(["a", "bb", "ccc"])
    assert seen == [["a", "bb"], ["ccc"]]
    assert out[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_remote_embedder_errors():
    with pytest.raises(ProviderFailure):
        remote(lambda r: httpx.Response(500)).embed(["a"])
    with pytest.raises(DimensionMismatch):
        remote(lambda r: httpx.Response(200, json={"data": [{"index": 0, "embedding": [1.0]}]})).embed(["a"])


def test_provider_from_config():
    assert isinstance(grounding.provider_from_config(None), NgramEmbedder)
    assert grounding.provider_from_config({"kind": "local_ngram", "dimension": 64}).dimension == 64
    with pytest.raises(ValueError):
        grounding.provider_from_config({"kind": "faiss"})
