from collections import Counter
from itertools import count

import numpy as np
import pytest
from scipy import stats

from dlcrec import augment, codec, data
from dlcrec.augment import AugmentConfig, AugmentedSample
from dlcrec.codec import Task
from dlcrec.data import InteractionSequence, Item, ItemCatalog, Step
from dlcrec.errors import DistributionGap, TaxonomyExhausted

GENRES = [f"G{i:02d}" for i in range(12)]
PER_GENRE = 30


@pytest.fixture(scope="module")
def cat():
    items = [Item(str(g * PER_GENRE + j + 1), f"Title {g}-{j}", (GENRES[g],)) for g in range(12) for j in range(PER_GENRE)]
    return ItemCatalog(items)


_users = count()


def make_sample(cat, future_genres, user=None):
    used = Counter()

    def pick(genre):
        item = cat.items_of_genre(genre)[used[genre]]
        used[genre] += 1
        return item

    history = [pick(GENRES[i % 12]) for i in range(10)]
    future = [pick(g) for g in future_genres]
    steps = [Step(i, n) for n, i in enumerate(history + future)]
    seq = InteractionSequence(user or f"u{next(_users)}", tuple(steps[:10]), tuple(steps[10:]))
    return augment.original_sample(seq, cat)


@pytest.fixture(scope="module")
def train(cat):
    rng = np.random.default_rng(0)
    out = []
    for _ in range(80):
        k = int(rng.integers(1, 8))
        gs = list(rng.choice(GENRES[:10], size=k, replace=False))  # G10 and G11 never appear in training
        out.append(make_sample(cat, [gs[int(rng.integers(k))] for _ in range(10)]).base)
    return out


@pytest.fixture(scope="module")
def gdist(cat, train):
    return data.genre_distribution(train, cat)


@pytest.fixture(scope="module")
def idist(cat, train):
    return data.item_distribution(train, cat)


def test_original_sample(cat):
    s = make_sample(cat, ["G00"] * 5 + ["G01"] * 5)
    assert s.n_o == s.n_c == 2 and s.provenance == "original"
    assert list(s.future_items) == s.base.future_ids


@pytest.mark.parametrize("x, n", [(2.5, 3), (3.0, 3), (3.5, 4), (0.5, 1), (0.49, 0), (0.3 * 10, 3)])
def test_round_half_away(x, n):
    assert augment.round_half_away(x) == n


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(error_rate_r=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(nc_range=(0, 3))
    with pytest.raises(ValueError):
        AugmentConfig(mix=("GF-X",))
    assert AugmentConfig().to_dict() == {"seed": 0, "error_rate_r": 0.3, "nc_range": [1, 10], "mix": list(augment.STRATEGIES)}


# -- GF-N ----------------------------------------------------------------------


def gf_noise_support(genres, taxonomy):
    """Exact output distribution of GF-N by enumerating (slot, noisy genre)."""
    present = set(genres)
    candidates = [g for g in taxonomy if g not in present]
    probs = Counter()
    for slot in range(len(genres)):
        for noisy in candidates:
            out = tuple(noisy if g == genres[slot] else g for g in genres)
            probs[out] += 1 / (len(genres) * len(candidates))
    return probs


def test_gf_noise_matches_enumeration(cat):
    genres = ["G00"] * 6 + ["G01"] * 3 + ["G02"]
    sample = make_sample(cat, genres)
    support = gf_noise_support(genres, GENRES)
    n = 6000
    seen = Counter(augment.gf_noise(sample, GENRES, seed).future_genres for seed in range(n))
    assert set(seen) <= set(support)
    keys = list(support)
    p = stats.chisquare([seen[k] for k in keys], [support[k] * n for k in keys]).pvalue
    assert p > 0.001


def test_gf_noise_keeps_count_and_items(cat):
    sample = make_sample(cat, ["G03", "G04"] * 5)
    for seed in range(200):
        out = augment.gf_noise(sample, GENRES, seed)
        assert out.n_distinct == sample.n_distinct == out.n_c == out.n_o
        assert out.future_items == sample.future_items
        assert out.provenance == "GF-N"


def test_gf_noise_exhausted(cat):
    small = GENRES[:10]
    sample = make_sample(cat, small)
    with pytest.raises(TaxonomyExhausted):
        augment.gf_noise(sample, small, 0)


# -- GF-D ----------------------------------------------------------------------


def test_gf_dist_hits_target_count(cat, gdist):
    sample = make_sample(cat, ["G00"] * 4 + ["G01"] * 3 + ["G02"] * 2 + ["G03"])
    drawn = Counter()
    for seed in range(3000):
        out = augment.gf_dist(sample, GENRES, gdist, seed)
        assert out.n_distinct == out.n_c == min(out.n_c_drawn, 10, len(GENRES))
        assert out.n_o == 4
        drawn[out.n_c_drawn] += 1
    assert set(drawn) == set(range(1, 11))
    assert stats.chisquare([drawn[k] for k in range(1, 11)]).pvalue > 0.001


def test_gf_dist_drop_keeps_most_frequent(cat, gdist):
    genres = ["G00"] * 4 + ["G01"] * 3 + ["G02"] * 2 + ["G03"]
    sample = make_sample(cat, genres)
    slot_hist = Counter()
    for seed in range(3000):
        out = augment.gf_dist(sample, GENRES, gdist, seed, nc_range=(2, 2))
        assert set(out.future_genres) == {"G00", "G01"}
        assert out.future_genres[:7] == tuple(genres[:7])  # kept slots untouched
        slot_hist[out.future_genres[9]] += 1
    # dropped slots are reassigned uniformly among the kept genres
    assert stats.chisquare([slot_hist["G00"], slot_hist["G01"]]).pvalue > 0.001


def test_gf_dist_drop_ties_broken_by_name(cat, gdist):
    sample = make_sample(cat, ["G05", "G04", "G03"] * 3 + ["G06"])
    out = augment.gf_dist(sample, GENRES, gdist, 0, nc_range=(2, 2))
    # G06 (1 slot) goes first, then the 3-slot tie drops G03 before G04 and G05
    assert set(out.future_genres) == {"G04", "G05"}


def test_gf_dist_add_uses_training_genres(cat, gdist):
    sample = make_sample(cat, ["G00"] * 10)
    for seed in range(300):
        out = augment.gf_dist(sample, GENRES, gdist, seed, nc_range=(3, 3))
        assert "G00" in out.future_genres and out.n_distinct == 3
        # the weighted support still has spare genres, so untrained ones never appear
        assert not {"G10", "G11"} & set(out.future_genres)


def test_gf_dist_new_genres_follow_train_distribution(cat, gdist):
    sample = make_sample(cat, ["G00"] * 10)
    n = 6000
    got = Counter()
    for seed in range(n):
        out = augment.gf_dist(sample, GENRES, gdist, seed, nc_range=(2, 2))
        (new,) = set(out.future_genres) - {"G00"}
        got[new] += 1
    support = [g for g in GENRES if g != "G00" and gdist.get(g, 0) > 0]
    w = np.array([gdist[g] for g in support])
    expected = w / w.sum() * n
    assert stats.chisquare([got[g] for g in support], expected).pvalue > 0.001


def test_gf_dist_clamps_to_taxonomy(cat):
    small = GENRES[:4]
    sample = make_sample(cat, ["G00"] * 10)
    out = augment.gf_dist(sample, small, {g: 1.0 for g in small}, 0, nc_range=(8, 8))
    assert out.n_c_drawn == 8 and out.n_c == 4 and out.n_distinct == 4


# -- IP-N / IP-D ---------------------------------------------------------------


def test_ip_noise_replaces_exactly_three(cat, idist):
    sample = make_sample(cat, ["G00"] * 5 + ["G01"] * 5)
    for seed in range(1000):
        out = augment.ip_noise(sample, idist, 0.3, seed)
        changed = [i for i in range(10) if out.future_items[i] != sample.future_items[i]]
        assert len(changed) == 3
        assert len(set(out.future_items)) == 10
        for i in changed:
            assert cat.genre(out.future_items[i]) != sample.future_genres[i]
            assert out.future_genres[i] == cat.genre(out.future_items[i])
        assert out.n_c == out.n_distinct and out.n_o == 2


@pytest.mark.parametrize("r, m", [(0.0, 0), (0.05, 1), (0.25, 3), (1.0, 10)])
def test_ip_noise_counts(cat, idist, r, m):
    sample = make_sample(cat, ["G00"] * 10)
    out = augment.ip_noise(sample, idist, r, 0)
    assert sum(a != b for a, b in zip(out.future_items, sample.future_items)) == m


def test_ip_noise_gap(cat):
    only = data.ItemDistribution({"G00": {"1": 3}})
    sample = make_sample(cat, ["G00"] * 10)
    with pytest.raises(DistributionGap):
        augment.ip_noise(sample, only, 0.3, 0)


def test_ip_dist_resamples_changed_slots(cat, gdist, idist):
    sample = make_sample(cat, ["G00"] * 10)
    for seed in range(300):
        gfd = augment.gf_dist(sample, GENRES, gdist, seed)
        out = augment.ip_dist(sample, gfd, idist, seed)
        assert out.future_genres == gfd.future_genres
        for i in range(10):
            if gfd.future_genres[i] == sample.future_genres[i]:
                assert out.future_items[i] == sample.future_items[i]
            else:
                assert cat.genre(out.future_items[i]) == gfd.future_genres[i]
        assert out.provenance == "IP-D"


def test_ip_dist_rejects_foreign_draw(cat, gdist, idist):
    a, b = make_sample(cat, ["G00"] * 10), make_sample(cat, ["G01"] * 10)
    with pytest.raises(ValueError):
        augment.ip_dist(a, augment.gf_dist(b, GENRES, gdist, 0), idist, 0)


# -- batch + corpora -----------------------------------------------------------


def test_augment_all_is_deterministic(cat, train, gdist, idist):
    originals = [augment.original_sample(s, cat) for s in train]
    cfg = AugmentConfig(seed=4)
    a = augment.augment_all(originals, cfg, GENRES, gdist, idist)
    b = augment.augment_all(originals, cfg, GENRES, gdist, idist)
    assert a == b
    assert all(len(v) == len(originals) for v in a.values())
    for gfd, ipd in zip(a["GF-D"], a["IP-D"]):
        assert gfd.future_genres == ipd.future_genres
    c = augment.augment_all(originals, AugmentConfig(seed=5), GENRES, gdist, idist)
    assert c["GF-D"] != a["GF-D"]


def test_augment_mix_subset(cat, train, gdist, idist):
    originals = [augment.original_sample(s, cat) for s in train[:5]]
    out = augment.augment_all(originals, AugmentConfig(mix=("IP-N",)), GENRES, gdist, idist)
    assert list(out) == ["IP-N"]


def test_assemble_order_and_manifest(cat, train, gdist, idist):
    originals = [augment.original_sample(s, cat) for s in train[:6]]
    out = augment.augment_all(originals, AugmentConfig(), GENRES, gdist, idist)
    corpus = augment.assemble(originals, out, Task.GF, cat)
    assert corpus.manifest == {"task": "GF", "counts": {"original": 6, "GF-N": 6, "GF-D": 6}, "total": 18}
    first = corpus.samples[0]
    assert codec.parse_gf(first.output) == list(originals[0].future_genres)
    noisy = corpus.samples[6]
    assert codec.parse_gf(noisy.output) == list(out["GF-N"][0].future_genres)
    assert augment.assemble(originals, out, Task.GP, cat).manifest["total"] == 6


def test_instruction_outputs_parse_back(cat, gdist, idist):
    sample = make_sample(cat, ["G02"] * 3 + ["G01"] * 4 + ["G05"] * 3)
    gp = augment.gp_instruction(sample, cat)
    assert gp.output == "G01, G02, G05"
    assert "provide the 3 most likely" in gp.instruction
    gf = augment.gf_instruction(sample, cat)
    assert "[G01, G02, G05]" in gf.instruction
    ipn = augment.ip_noise(sample, idist, 0.3, 1)
    ip = augment.ip_instruction(ipn, cat)
    assert [t for t, _ in codec.parse_ip(ip.output)] == [cat.title(i) for i in ipn.future_items]
    assert [g for _, g in codec.parse_trail(ip.input)[10:]] == list(ipn.future_genres)


def test_augmented_sample_is_hashable(cat):
    s = make_sample(cat, ["G00"] * 10)
    assert isinstance(s, AugmentedSample) and hash(s) == hash(s)
