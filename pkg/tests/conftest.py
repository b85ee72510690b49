import itertools
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from casa.authz import TokenIssuer  # noqa: E402
from casa.facility import Facility, from_dict  # noqa: E402
from casa.pipeline.datagen import gen_dataset  # noqa: E402

KEY = b"test-signing-key-0123456789abcdef"
_names = itertools.count(1)


@pytest.fixture
def issuer():
    return TokenIssuer(KEY, audience="casa")


@pytest.fixture
def admin_token(issuer):
    return issuer.mint("admin", ["read:/", "write:/", "transform:/", "submit:queue/default", "infer:models/",
                                 "write:models/"])


def facility_config(tmp_path, **sections):
    """A valid config rooted in ``tmp_path`` with ephemeral ports and a unique facility name."""
    doc = {
        "facility": f"test{next(_names)}",
        "ports": {s: 0 for s in ("admin", "batch", "sched", "cache", "delivery", "ml")},
        "cache": {"origin_root": str(tmp_path / "origin"), "block_size": 65536, "capacity_blocks": 4096},
        "delivery": {"root": str(tmp_path / "delivery")},
        "credentials_dir": str(tmp_path / "credentials"),
        "users": [{"name": "alice", "caps": ["read:/store/", "submit:queue/default", "transform:/store/"]},
                  {"name": "bob", "caps": ["read:/store/public/"]}],
    }
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return from_dict(doc)


@pytest.fixture
def make_facility(tmp_path):
    started = []

    def make(transport="inproc", **sections):
        fac = Facility(facility_config(tmp_path, **sections), transport=transport).up()
        started.append(fac)
        return fac

    yield make
    for fac in started:
        fac.down()


@pytest.fixture
def dataset(tmp_path):
    """A small 8-partition dataset at /store/ds under the test origin."""
    gen_dataset(str(tmp_path / "origin" / "store" / "ds"), 4000, 8, seed=11)
    return "/store/ds"
