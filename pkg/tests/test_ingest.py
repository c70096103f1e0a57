import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_record, record_json
from viraltweets.ingest import (
    DeviceClass,
    FilterConfig,
    IngestError,
    classify_source,
    filter_corpus,
    parse_records,
    serialize_records,
)


def test_jsonl_line_maps_every_field():
    rec = make_record(3, hashtags=("a", "b"), media_type="photo", location="Ohio", verified=True)
    result = parse_records(record_json(rec).encode(), "jsonl")
    assert result.records == [rec]
    assert result.n_skipped == 0


def test_missing_status_id_is_a_row_error():
    good = json.loads(record_json(make_record(1)))
    bad = dict(good)
    del bad["status_id"]
    bad_line = json.dumps(bad)
    raw = "\n".join([record_json(make_record(0)), bad_line, json.dumps(good)])
    result = parse_records(raw.encode(), "jsonl")
    assert [r.status_id for r in result.records] == ["1000", "1001"]
    assert result.n_skipped == 1
    assert result.errors[0].line == 2
    assert "status_id" in result.errors[0].message


@pytest.mark.parametrize("field", ["created_at", "retweet_count"])
def test_other_required_fields(field):
    obj = json.loads(record_json(make_record()))
    obj[field] = None
    result = parse_records(json.dumps(obj).encode())
    assert result.records == [] and result.n_skipped == 1


def test_malformed_json_and_negative_counts_are_skipped():
    neg = json.loads(record_json(make_record(2)))
    neg["retweet_count"] = -1
    raw = "\n".join(["{not json", json.dumps(neg), record_json(make_record(4))])
    result = parse_records(raw.encode())
    assert [r.status_id for r in result.records] == ["1004"]
    assert [e.line for e in result.errors] == [1, 2]


def test_duplicate_status_id_skipped():
    raw = "\n".join([record_json(make_record(1)), record_json(make_record(1))])
    result = parse_records(raw.encode())
    assert len(result.records) == 1 and result.n_skipped == 1


def test_csv_with_header_preserves_order():
    header = "user_id,status_id,created_at,text,source,retweet_count,favorite_count,lang,account_lang,hashtags,verified\n"
    rows = [
        "u1,30,2018-11-02T10:00:00Z,hello,Twitter Web Client,4,1,en,en,a b,true\n",
        "u2,10,2018-11-03T10:00:00Z,hi there,TweetDeck,2,2,en,en,,false\n",
        'u3,20,2018-11-04T10:00:00Z,"x, y",Twitter for Android,9,3,en,en,"[""c""]",0\n',
    ]
    result = parse_records((header + "".join(rows)).encode(), "csv")
    assert [r.status_id for r in result.records] == ["30", "10", "20"]
    assert result.records[0].hashtags == ("a", "b")
    assert result.records[0].verified is True
    assert result.records[2].hashtags == ("c",)
    assert result.records[2].text == "x, y"


def test_undecodable_stream_is_fatal():
    with pytest.raises(IngestError):
        parse_records(b"\xff\xfe\xfa", "jsonl")


def test_unknown_format():
    with pytest.raises(ValueError):
        parse_records(b"", "xml")


def test_jsonl_round_trip_is_exact():
    recs = [
        make_record(i, text="naïve café 😀 https://x.co/a", hashtags=("Ünï", "b"), location="Zürich")
        for i in range(5)
    ]
    text = serialize_records(recs)
    again = parse_records(text.encode()).records
    assert again == recs
    assert serialize_records(again) == text


def test_serialize_appends_device_class():
    line = serialize_records([make_record(source="Twitter Web Client")], with_device_class=True)
    assert json.loads(line)["device_class"] == "Desktop"


@pytest.mark.parametrize(
    "source, expected",
    [
        ("Twitter for iPhone", DeviceClass.MOBILE),
        ("Twitter Web Client", DeviceClass.DESKTOP),
        ("TweetDeck", DeviceClass.OTHER),
        ("Twitter for Android", DeviceClass.MOBILE),
        ("Twitter for Mac", DeviceClass.DESKTOP),
        ("Mobile Web (M2)", DeviceClass.MOBILE),
        ("Windows Phone", DeviceClass.MOBILE),
        ("", DeviceClass.OTHER),
    ],
)
def test_classify_source(source, expected):
    assert classify_source(source) is expected


@given(st.text(max_size=40), st.randoms(use_true_random=False))
def test_classify_source_ignores_case(text, rnd):
    shuffled = "".join(c.upper() if rnd.random() < 0.5 else c.lower() for c in text)
    assert classify_source(shuffled) == classify_source(text)


def test_language_and_engagement_filters():
    recs = [
        make_record(0, lang="fr"),
        make_record(1, account_lang="de"),
        make_record(2, retweet_count=0),
        make_record(3, favorite_count=0),
        make_record(4, text="https://t.co/abc   "),
        make_record(5),
    ]
    result = filter_corpus(recs)
    assert [r.status_id for r in result.records] == ["1005"]
    dropped = {row["stage"]: row["dropped"] for row in result.report}
    assert dropped == {
        "account_dates": 0,
        "language": 2,
        "engagement": 2,
        "text": 1,
        "retweet_percentile": 0,
    }


def test_account_created_after_tweet_is_dropped(make):
    bad = make(1, account_created_at=make(1).created_at.replace(year=2019))
    result = filter_corpus([bad, make(2)], FilterConfig(retweet_percentile_keep=1.0))
    assert [r.status_id for r in result.records] == ["1002"]


def _percentile_oracle(counts, keep):
    # brute force: keep the ceil(keep*n) largest, plus anything tied with the smallest kept value
    ordered = sorted(counts, reverse=True)
    n_keep = -(-int(round(keep * len(counts) * 1e9)) // 10**9)
    cut = ordered[n_keep - 1]
    return [c for c in counts if c >= cut]


def test_percentile_fixture_keeps_75():
    recs = [make_record(i, retweet_count=i + 1) for i in range(100)]
    random.Random(3).shuffle(recs)
    out = filter_corpus(recs).records
    assert len(out) == 75
    assert min(r.retweet_count for r in out) == 26
    assert [r.retweet_count for r in out] == _percentile_oracle([r.retweet_count for r in recs], 0.75)
    # order is the input order
    assert [r.status_id for r in out] == [r.status_id for r in recs if r.retweet_count >= 26]


def test_percentile_ties_are_kept():
    recs = [make_record(i, retweet_count=c) for i, c in enumerate([1, 2, 2, 2, 5])]
    out = filter_corpus(recs, FilterConfig(retweet_percentile_keep=0.5)).records
    assert sorted(r.retweet_count for r in out) == [2, 2, 2, 5]


def test_empty_input():
    result = filter_corpus([])
    assert result.records == []


@pytest.mark.parametrize("keep", [0.0, -0.1, 1.5])
def test_bad_keep_fraction(keep):
    with pytest.raises(ValueError):
        FilterConfig(retweet_percentile_keep=keep)


count_lists = st.lists(st.integers(0, 50), min_size=0, max_size=60)


@given(count_lists, st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0]))
def test_every_output_record_satisfies_the_predicates(counts, keep):
    recs = [make_record(i, retweet_count=c, lang="en" if c % 7 else "es") for i, c in enumerate(counts)]
    result = filter_corpus(recs, FilterConfig(retweet_percentile_keep=keep))
    for r in result.records:
        assert r.lang == "en" and r.account_lang == "en"
        assert r.retweet_count > 0 and r.favorite_count > 0
        assert r.retweet_count >= result.threshold
    survivors = [c for c in counts if c > 0 and c % 7]
    assert len(result.records) == len(_percentile_oracle(survivors, keep)) if survivors else not result.records


@given(count_lists)
def test_filter_without_percentile_cut_is_idempotent(counts):
    config = FilterConfig(retweet_percentile_keep=1.0)
    recs = [make_record(i, retweet_count=c, text="" if c % 5 == 0 else "hi") for i, c in enumerate(counts)]
    once = filter_corpus(recs, config).records
    assert filter_corpus(once, config).records == once
