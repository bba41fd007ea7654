import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldnas.data import (ML_ITEM_FIELDS, CategoryEncoder, DataError, DatasetSchema, Interaction, Task,
                          TaskSplit, build_tasks, largest_remainder, load_split, make_synthetic,
                          parse_generic_csv, parse_movielens, prepare_split, save_split, split_long_tail,
                          split_tasks)

SCHEMA = DatasetSchema("toy", ("age",), (3,), ("genre",), (4,), (1.0, 5.0))


def history(user, n, offset=0):
    return [Interaction(user, offset + i, float(1 + (user + i) % 5), (1 + user % 3,), (1 + i % 4,))
            for i in range(n)]


def many_users(n_users=30, length=50):
    rows = []
    for u in range(1, n_users + 1):
        rows += history(u, length)
    return rows


@pytest.fixture
def ml_files(tmp_path):
    (tmp_path / "users.dat").write_text("1::F::1::10::48067\n2::M::56::16::70072\n")
    (tmp_path / "movies.dat").write_text(
        "1::Toy Story (1995)::Animation|Children's|Comedy\n"
        "2::Jumanji (1995)::Adventure|Children's|Fantasy|Action|Drama\n"
        "3::Caf\xe9 (1999)::Drama\n", encoding="latin-1")
    (tmp_path / "ratings.dat").write_text(
        "1::1::5::978300760\n1::2::3::978302109\n2::3::4::978301968\n2::99::4::978301968\n")
    return tmp_path


def test_schema_normalization_round_trip():
    y = np.array([1.0, 3.0, 5.0])
    np.testing.assert_allclose(SCHEMA.normalize(y), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(SCHEMA.denormalize(SCHEMA.normalize(y)), y)
    assert DatasetSchema.from_dict(SCHEMA.to_dict()) == SCHEMA


def test_schema_validation():
    with pytest.raises(ValueError):
        DatasetSchema("x", ("a",), (3, 4), (), (), (0, 1))
    with pytest.raises(ValueError):
        DatasetSchema("x", ("a",), (3,), (), (), (0, 1))
    with pytest.raises(ValueError):
        DatasetSchema("x", ("a",), (3,), ("b",), (2,), (1, 1))
    with pytest.raises(DataError):
        SCHEMA.check(Interaction(1, 1, 9.0, (1,), (1,)))
    with pytest.raises(DataError):
        SCHEMA.check(Interaction(1, 1, 3.0, (4,), (1,)))


def test_task_invariants():
    rows = history(1, 4)
    with pytest.raises(ValueError):
        Task(1, (), tuple(rows))
    with pytest.raises(ValueError):
        Task(1, tuple(rows[:2]), tuple(rows[1:]))
    with pytest.raises(ValueError):
        Task(2, tuple(rows[:2]), tuple(rows[2:]))
    t = Task(1, tuple(rows[:2]), tuple(rows[2:]))
    assert t.support_arrays.user.shape == (2, 1)
    np.testing.assert_array_equal(t.query_arrays.item_id, [2, 3])


def test_encoder_reserves_zero_and_round_trips(tmp_path):
    enc = CategoryEncoder()
    assert enc.encode("zip", "10001") == 1
    assert enc.encode("zip", "10002") == 2
    assert enc.encode("zip", "10001") == 1
    assert enc.encode("zip", "unseen", grow=False) == 0
    enc.encode("odd/field name", "x")
    enc.save(tmp_path / "enc")
    back = CategoryEncoder.load(tmp_path / "enc")
    assert back.tables == enc.tables
    assert back.decode("zip", 2) == "10002"
    assert back.decode("zip", 0) is None


def test_parse_movielens(ml_files):
    ds = parse_movielens(ml_files / "ratings.dat", ml_files / "users.dat", ml_files / "movies.dat")
    assert ds.schema.n_user_fields == 4 and ds.schema.item_fields == ML_ITEM_FIELDS
    assert len(ds.interactions) == 3
    assert ds.stats["missing_metadata"] == 1
    first = ds.interactions[0]
    assert ds.encoder.decode("year", first.item_features[0]) == "1995"
    assert ds.encoder.decode("genre4", first.item_features[4]) == "-"
    schema, interactions = ds
    assert schema is ds.schema and interactions is ds.interactions


def test_movielens_rejects_wrong_file(ml_files):
    (ml_files / "bad.dat").write_text("a,b,c\nd,e,f\n")
    with pytest.raises(DataError):
        parse_movielens(ml_files / "bad.dat", ml_files / "users.dat", ml_files / "movies.dat")
    with pytest.raises(DataError):
        parse_movielens(ml_files / "nope.dat", ml_files / "users.dat", ml_files / "movies.dat")


def test_generic_csv(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("uid,iid,score,city,tag\nu1,a,3,x,t1\nu1,b,4,x,t2\nu2,a,1,y,t1\nu1,a,5,x,t1\n")
    spec = {"uid": "user_id", "iid": "item_id", "score": "rating", "city": "user_feat", "tag": "item_feat"}
    ds = parse_generic_csv(path, spec, rating_range=(1, 5))
    assert ds.stats["duplicates"] == 1
    kept = {(it.user_id, it.item_id): it.rating for it in ds.interactions}
    assert kept[(1, 1)] == 5.0
    assert ds.schema.user_fields == ("city",) and ds.schema.item_cardinalities == (2,)


def test_generic_csv_errors(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("uid,iid,score,f\nu1,a,3,x\nu1,b,oops,x\n")
    spec = {"uid": "user_id", "iid": "item_id", "score": "rating", "f": "item_feat"}
    with pytest.raises(DataError, match="r.csv:3"):
        parse_generic_csv(path, spec)
    with pytest.raises(DataError, match="unknown column"):
        parse_generic_csv(path, {**spec, "missing": "user_feat"})
    with pytest.raises(DataError, match="unknown role"):
        parse_generic_csv(path, {**spec, "f": "colour"})


def test_build_tasks_fixed_support():
    rows = history(1, 30) + history(2, 10) + history(3, 25)
    tasks = build_tasks(rows, "fixed_support", N=20, min_len=12, max_len=40, rng_seed=0)
    assert [t.user_id for t in tasks] == [1, 3]
    assert tasks.excluded == 1
    assert all(len(t.support) == 20 for t in tasks)
    assert len(tasks[0].query) == 10


def test_build_tasks_half_split_and_skips():
    tasks = build_tasks(history(1, 7) + history(2, 1), "half_split", min_len=1, max_len=10)
    assert [len(t.support) for t in tasks] == [3]
    assert tasks.skipped == 1
    assert build_tasks(history(1, 20), N=20, min_len=1).skipped == 1


def test_build_tasks_is_deterministic():
    rows = many_users(12)
    a = build_tasks(rows, N=10, min_len=10, rng_seed=4)
    b = build_tasks(list(reversed(rows)), N=10, min_len=10, rng_seed=4)
    assert a == b
    assert a != build_tasks(rows, N=10, min_len=10, rng_seed=5)


def test_largest_remainder():
    assert largest_remainder(10, (0.7, 0.1, 0.2)) == [7, 1, 2]
    assert largest_remainder(11, (0.7, 0.1, 0.2)) == [8, 1, 2]
    assert sum(largest_remainder(97, (0.7, 0.1, 0.2))) == 97


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 40), st.integers(0, 10_000))
def test_split_is_user_disjoint_and_complete(n_users, seed):
    tasks = build_tasks(many_users(n_users, 45), N=20, rng_seed=seed)
    split = split_tasks(tasks, rng_seed=seed)
    ids = [{t.user_id for t in part} for part in (split.train, split.val, split.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(split.counts().values()) == n_users
    for t in tasks:
        assert not {r.item_id for r in t.support} & {r.item_id for r in t.query}


def test_split_guards():
    tasks = build_tasks(many_users(9, 45), N=20)
    with pytest.raises(ValueError):
        split_tasks(tasks)
    with pytest.raises(ValueError):
        split_tasks(build_tasks(many_users(20, 45), N=20), (0.5, 0.5, 0.1))
    with pytest.raises(ValueError):
        TaskSplit(tuple(tasks[:2]), tuple(tasks[1:3]), (), 0)


def test_long_tail_split_sends_heavy_users_to_train():
    rows = many_users(20, 10) + [r for u in range(100, 104) for r in history(u, 60)]
    tasks = build_tasks(rows, "half_split", min_len=2, max_len=999)
    split = split_long_tail(tasks)
    assert {100, 101, 102, 103} <= {t.user_id for t in split.train}
    assert len(split.val) + len(split.test) == 20 - largest_remainder(20, (0.7, 0.1, 0.2))[0]


def test_prepare_split_presets():
    split = prepare_split(many_users(20, 50), "movielens", rng_seed=1)
    assert split.counts() == {"train": 14, "val": 2, "test": 4}
    with pytest.raises(ValueError):
        prepare_split([], "netflix")


def test_split_persistence(tmp_path):
    split = prepare_split(many_users(20, 45), "synthetic", rng_seed=3)
    digest = save_split(split, SCHEMA, tmp_path / "split.npz")
    assert len(digest) == 64
    back, schema = load_split(tmp_path / "split.npz")
    assert schema == SCHEMA
    assert back == split
    assert save_split(back, schema, tmp_path / "again.npz") == digest


def test_synthetic_is_reproducible():
    a, truth = make_synthetic("h*p1+p2", n_users=40, n_items=60, rng_seed=2)
    b, _ = make_synthetic("h*p1+p2", n_users=40, n_items=60, rng_seed=2)
    assert a.interactions == b.interactions
    assert a.schema.rating_range == (0.0, 1.0)
    assert str(truth.planted) == "h * p1 + p2"


def test_synthetic_noise_free_ratings_match_truth():
    ds, truth = make_synthetic("max(h,p1)+p2", n_users=30, n_items=80, noise_sd=0.0, rng_seed=1)
    for it in ds.interactions[:200]:
        assert it.rating == pytest.approx(truth.rating(it.user_id, it.user_features, it.item_features), abs=1e-12)
    ratings = np.array([it.rating for it in ds.interactions])
    assert 0.0 <= ratings.min() and ratings.max() <= 1.0
    assert ratings.std() > 0.05


def test_synthetic_users_have_enough_history_for_tasks():
    ds, _ = make_synthetic("h+p1", n_users=50, n_items=100)
    split = prepare_split(ds.interactions, "synthetic")
    assert sum(split.counts().values()) == 50
