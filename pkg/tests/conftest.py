import json
from datetime import datetime, timedelta, timezone

import pytest

from viraltweets.ingest import TweetRecord
from viraltweets.lexicon import Lexicon, default_lexicon_dir, load_lexicon_dir

BASE = datetime(2018, 11, 1, 12, 0, 0, tzinfo=timezone.utc)


def make_record(i=0, **overrides) -> TweetRecord:
    fields = dict(
        user_id=f"u{i}",
        status_id=str(1000 + i),
        created_at=BASE + timedelta(hours=i),
        text=f"good day number {i}",
        source="Twitter for iPhone",
        display_text_width=20,
        favorite_count=3,
        retweet_count=5,
        hashtags=("win",),
        media_type=None,
        lang="en",
        location=None,
        followers_count=100 + i,
        friends_count=50,
        listed_count=2,
        statuses_count=1000,
        favourites_count=10,
        account_created_at=BASE - timedelta(days=30),
        verified=False,
        account_lang="en",
    )
    fields.update(overrides)
    return TweetRecord(**fields)


def record_json(record: TweetRecord) -> str:
    return json.dumps(record.to_dict())


@pytest.fixture
def make():
    return make_record


@pytest.fixture(scope="session")
def bundled_lexicons():
    return load_lexicon_dir(default_lexicon_dir())


@pytest.fixture
def toy_lexicon():
    return Lexicon("toy", {"good": 1.0, "bad": -1.0, "win": 0.5})


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
