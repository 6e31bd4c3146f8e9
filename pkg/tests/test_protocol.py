import json
import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promisekit.predicates import (
    AT_LEAST_IN_ORDER,
    EQUALS,
    InstanceId,
    Named,
    Property,
    PropertyConstraint,
    Quantity,
)
from promisekit.protocol import (
    ACTION_STATUSES,
    FRAME_MAGIC,
    MAX_FRAME_BODY,
    ActionMsg,
    ConnectionClosed,
    Envelope,
    EnvironmentMsg,
    InvariantViolation,
    MalformedMessage,
    PromisePart,
    PromiseResponseMsg,
    decode,
    encode,
    frame,
    make_request,
    recv_frame,
    send_frame,
)


# --- strategies ---

_names = st.from_regex(r"[a-z][a-z0-9-]{0,9}", fullmatch=True)
_scalars = st.one_of(st.integers(-5, 50), st.booleans(),
                     st.text(min_size=1, max_size=8))

_quantity = st.builds(Quantity, resource_type=_names, amount=st.integers(1, 9))
_named = st.builds(Named, st.builds(InstanceId, _names, _names))


@st.composite
def _properties(draw):
    rt = draw(_names)
    constraints = draw(st.dictionaries(_names, st.tuples(
        st.sampled_from([EQUALS, AT_LEAST_IN_ORDER]), _scalars),
        min_size=1, max_size=3))
    return Property(rt, tuple(
        PropertyConstraint(name, cmp, val)
        for name, (cmp, val) in sorted(constraints.items())), draw(st.integers(1, 4)))


_predicates = st.one_of(_quantity, _named, _properties())
_payloads = st.one_of(
    st.none(),
    st.dictionaries(_names, st.one_of(_scalars, st.lists(_scalars, max_size=3)), max_size=3),
    st.text(max_size=12),
    st.integers(-100, 100),
)


@st.composite
def envelopes(draw):
    requests = []
    for i in range(draw(st.integers(0, 3))):
        requests.append(make_request(
            f"r{i}",
            draw(st.lists(_predicates, min_size=1, max_size=3)),
            draw(st.integers(1, 500)),
            draw(st.lists(_names.map(lambda s: "p-" + s), max_size=2, unique=True)),
        ))
    responses = []
    for i in range(draw(st.integers(0, 3))):
        accepted = draw(st.booleans())
        responses.append(PromiseResponseMsg(
            promise_id=f"p-{i}" if accepted else None,
            result="accepted" if accepted else "rejected",
            granted_duration=draw(st.integers(0, 500)),
            correlation=f"r{i}",
        ))
    part = PromisePart(tuple(requests), tuple(responses)) \
        if requests or responses else None

    action = None
    environment = None
    if draw(st.booleans()) or part is None:
        status = draw(st.one_of(st.none(), st.sampled_from(ACTION_STATUSES)))
        action = ActionMsg(draw(_names), draw(_payloads), status)
        if draw(st.booleans()):
            n = draw(st.integers(0, 3))
            environment = EnvironmentMsg(
                tuple(f"p-{i}" for i in range(n)),
                tuple(draw(st.sampled_from(["retain", "release-after-success"]))
                      for _ in range(n)))
    error = draw(st.one_of(st.none(), st.just("malformed-message")))
    if part is None and action is None and error is None:
        error = "internal-failure"
    return Envelope(part, environment, action, error)


# --- round-trip ---

@settings(max_examples=300, deadline=None)
@given(envelopes())
def test_round_trip_identity(envelope):
    assert decode(encode(envelope)) == envelope


def test_request_example_round_trips():
    req = make_request("r-1", [Quantity("pink-widget", 5)], 30)
    e = Envelope(promise_part=PromisePart(requests=(req,)))
    assert decode(encode(e)) == e


def test_piggybacked_response_next_to_a_request():
    req = make_request("r-2", [Quantity("pink-widget", 5)], 30)
    resp = PromiseResponseMsg("p-9", "accepted", 30, "r-1")
    e = Envelope(promise_part=PromisePart(requests=(req,), responses=(resp,)))
    assert decode(encode(e)) == e


# --- decoder robustness ---

@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_decode_never_crashes_on_arbitrary_bytes(data):
    try:
        decode(data)
    except MalformedMessage:
        pass


@pytest.mark.parametrize("doc", [
    {},                                       # nothing present
    {"promise": {}},                          # empty promise part
    {"promise": {"promise-request": [{}]}},
    {"environment": {"promise-identifiers": ["p-1"], "release-options": []}},
    {"environment": {"promise-identifiers": ["p-1"],
                     "release-options": ["release-after-success"]}},  # env without action
    {"action": {"action-name": ""}},
    {"action": {"action-name": "go", "status": "sideways"}},
    {"action": {"action-name": "go"}, "bogus": 1},
    {"promise": {"promise-response": [{"promise-result": "accepted",
                                       "promise-duration": 5,
                                       "promise-correlation": "r1"}]}},  # accepted needs id
    {"promise": {"promise-request": [
        {"request-identifier": "r1",
         "predicates": [{"form": "quantity", "resource-type": "w", "amount": 1}],
         "resources": [], "promise-duration": 5}]}},  # resources must cover predicates
    {"promise": {"promise-request": [
        {"request-identifier": "r1",
         "predicates": [{"form": "quantity", "resource-type": "w", "amount": 1}],
         "resources": [{"resource-type": "w"}], "promise-duration": 0}]}},
])
def test_structurally_bad_documents_are_malformed(doc):
    with pytest.raises(MalformedMessage):
        decode(json.dumps(doc).encode())


def test_duplicate_request_identifiers_in_one_envelope():
    r1 = make_request("r-1", [Quantity("w", 1)], 5)
    e = Envelope(promise_part=PromisePart(requests=(r1, r1)))
    with pytest.raises(InvariantViolation):
        encode(e)


def test_empty_envelope_is_an_invariant_violation():
    with pytest.raises(InvariantViolation):
        encode(Envelope())
    with pytest.raises(InvariantViolation):
        encode(Envelope(promise_part=PromisePart()))


def test_environment_without_action_is_rejected_on_encode():
    env = EnvironmentMsg(("p-1",), ("retain",))
    with pytest.raises(InvariantViolation):
        encode(Envelope(environment=env,
                        promise_part=PromisePart(requests=(
                            make_request("r", [Quantity("w", 1)], 5),))))


def test_unserializable_payload_is_reported():
    e = Envelope(action=ActionMsg("go", object()))
    with pytest.raises(InvariantViolation):
        encode(e)


# --- normative field names ---

def test_wire_field_names_follow_the_protocol_doc():
    req = make_request("r-1", [Quantity("pink-widget", 5)], 30,
                       release_on_grant=("p-0",))
    resp = PromiseResponseMsg("p-1", "accepted", 30, "r-0")
    env = EnvironmentMsg(("p-1",), ("release-after-success",))
    e = Envelope(PromisePart((req,), (resp,)), env, ActionMsg("purchase-stock", {"n": 1}))
    doc = json.loads(encode(e))
    assert set(doc) == {"promise", "environment", "action"}
    assert set(doc["promise"]) == {"promise-request", "promise-response"}
    assert set(doc["promise"]["promise-request"][0]) == {
        "request-identifier", "predicates", "resources",
        "promise-duration", "release-on-grant"}
    assert set(doc["promise"]["promise-response"][0]) == {
        "promise-identifier", "promise-result", "promise-duration",
        "promise-correlation"}
    assert set(doc["environment"]) == {"promise-identifiers", "release-options"}
    assert doc["promise"]["promise-request"][0]["resources"] == [
        {"resource-type": "pink-widget"}]


def test_encoding_is_canonical():
    e = Envelope(action=ActionMsg("go", {"b": 1, "a": 2}))
    assert encode(e) == encode(decode(encode(e)))


# --- framing ---

def test_frame_round_trip_over_a_socketpair():
    a, b = socket.socketpair()
    try:
        body = encode(Envelope(action=ActionMsg("go")))
        send_frame(a, body)
        send_frame(a, body)
        assert recv_frame(b) == body
        assert recv_frame(b) == body
    finally:
        a.close()
        b.close()


def test_bad_magic_is_malformed():
    a, b = socket.socketpair()
    try:
        a.sendall(b"XXXX" + (5).to_bytes(4, "big") + b"hello")
        with pytest.raises(MalformedMessage):
            recv_frame(b)
    finally:
        a.close()
        b.close()


def test_clean_eof_between_frames():
    a, b = socket.socketpair()
    a.close()
    try:
        with pytest.raises(ConnectionClosed):
            recv_frame(b)
    finally:
        b.close()


def test_truncated_frame_is_malformed():
    a, b = socket.socketpair()
    try:
        a.sendall(FRAME_MAGIC + (10).to_bytes(4, "big") + b"abc")
        a.close()
        with pytest.raises(MalformedMessage):
            recv_frame(b)
    finally:
        b.close()


def test_oversized_frames_are_refused_both_ways():
    with pytest.raises(InvariantViolation):
        frame(b"x" * (MAX_FRAME_BODY + 1))
    a, b = socket.socketpair()
    try:
        a.sendall(FRAME_MAGIC + (MAX_FRAME_BODY + 1).to_bytes(4, "big"))
        with pytest.raises(MalformedMessage):
            recv_frame(b)
    finally:
        a.close()
        b.close()
