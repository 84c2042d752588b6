"""Server and client state machines for signature-gated federated averaging.

One round runs four phases: the server signs and broadcasts the global
parameters; each client verifies, trains locally, and submits a signed
delta; the server verifies every submission against the trusted key
registry; only the verified set is averaged into the next global model.

Round number and sender id live inside the signed bytes, so replayed or
re-labelled envelopes fail verification or the freshness checks. Rejected
updates are dropped for the round (no retry); a round whose verified set
is empty leaves the parameters unchanged.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass, field, replace

from pqfl import channel as _channel
from pqfl import codec, fedcore, sig
from pqfl.codec import MsgType, SignedEnvelope
from pqfl.errors import (
    ConnectionFailed,
    MalformedEnvelope,
    MalformedPayload,
    NonFiniteValue,
    ReplayDetected,
    SignatureInvalid,
    UnsupportedScheme,
    WrongSender,
)
from pqfl.fedcore import (
    ClientDataset,
    GlobalModel,
    ModelUpdate,
    TrainConfig,
    train_seed,
)

log = logging.getLogger("pqfl.protocol")

SERVER_ID = 0


@dataclass(frozen=True)
class KeyRegistry:
    """Trusted, frozen mapping from participant id to (scheme, public key).
    Id 0 is the server; 1..M are clients. Distributed out-of-band."""

    entries: dict[int, tuple[sig.SchemeId, bytes]]

    def public_key(self, participant_id: int) -> tuple[sig.SchemeId, bytes]:
        return self.entries[participant_id]

    def __contains__(self, participant_id: int) -> bool:
        return participant_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ProtocolOptions:
    strict: bool = False
    # Baseline mode for measuring what the signatures buy: accept updates
    # and models without checking signatures.
    verify_updates: bool = True
    verify_models: bool = True
    # Disabling the round freshness check demonstrates the replay hole the
    # binding exists to close. Never disable outside experiments.
    enforce_round_binding: bool = True


class RejectReason(enum.Enum):
    MALFORMED = "malformed"
    SIGNATURE_INVALID = "signature_invalid"
    STALE_ROUND = "stale_round"
    UNKNOWN_SENDER = "unknown_sender"
    DUPLICATE = "duplicate"
    NON_FINITE = "non_finite"


@dataclass(frozen=True)
class Rejection:
    sender_id: int | None  # claimed sender, None if the header never decoded
    reason: RejectReason
    detail: str = ""


@dataclass
class PhaseTimings:
    train_s: float = 0.0
    sign_s: float = 0.0
    verify_s: float = 0.0
    serialize_s: float = 0.0
    wall_s: float = 0.0

    def add(self, other: "PhaseTimings") -> None:
        self.train_s += other.train_s
        self.sign_s += other.sign_s
        self.verify_s += other.verify_s
        self.serialize_s += other.serialize_s


@dataclass
class RoundOutcome:
    round: int
    updates_received: int
    verified_count: int
    rejections: list[Rejection]
    skipped_clients: list[int]
    global_loss: float
    timings: PhaseTimings
    payload_bytes: int
    signature_bytes: int


@dataclass
class ServerState:
    model: GlobalModel
    keypair: sig.KeyPair
    registry: KeyRegistry
    cfg: TrainConfig
    options: ProtocolOptions = field(default_factory=ProtocolOptions)
    eval_data: ClientDataset | None = None

    @property
    def round(self) -> int:
        return self.model.round


@dataclass
class ClientState:
    client_id: int
    keypair: sig.KeyPair
    server_public_key: bytes
    scheme: sig.SchemeId
    architecture: fedcore.ModelArchitecture
    dataset: ClientDataset
    cfg: TrainConfig
    options: ProtocolOptions = field(default_factory=ProtocolOptions)
    last_accepted_round: int = -1
    current_model: GlobalModel | None = None


def setup_keys(
    cfg: TrainConfig,
    scheme: sig.SchemeId,
    seed: int | None,
    model: GlobalModel,
    client_datasets: list[ClientDataset],
    options: ProtocolOptions | None = None,
    eval_data: ClientDataset | None = None,
) -> tuple[ServerState, list[ClientState], KeyRegistry]:
    """Generate all key pairs, freeze the registry, and build both sides'
    states. Key distribution is assumed trusted (out of band)."""
    options = options or ProtocolOptions()
    if options.strict and scheme == sig.SchemeId.TEST_SCHEME:
        raise UnsupportedScheme("TestScheme is not allowed in strict mode")
    if len(client_datasets) != cfg.num_clients:
        raise ValueError(
            f"{len(client_datasets)} shards for {cfg.num_clients} clients"
        )

    def key_seed(participant_id: int) -> int | None:
        return None if seed is None else fedcore.derive_seed(seed, "key", participant_id)

    server_kp = sig.keygen(scheme, key_seed(SERVER_ID))
    client_kps = [sig.keygen(scheme, key_seed(i)) for i in range(1, cfg.num_clients + 1)]

    entries = {SERVER_ID: (scheme, server_kp.public_key)}
    for i, kp in enumerate(client_kps, start=1):
        entries[i] = (scheme, kp.public_key)
    registry = KeyRegistry(entries=entries)

    server = ServerState(
        model=model,
        keypair=server_kp,
        registry=registry,
        cfg=cfg,
        options=options,
        eval_data=eval_data,
    )
    clients = [
        ClientState(
            client_id=i,
            keypair=kp,
            server_public_key=server_kp.public_key,
            scheme=scheme,
            architecture=model.architecture,
            dataset=ds,
            cfg=cfg,
            options=options,
        )
        for i, (kp, ds) in enumerate(zip(client_kps, client_datasets), start=1)
    ]
    return server, clients, registry


# --- per-phase operations ----------------------------------------------------

def distribute_model(server: ServerState, timings: PhaseTimings | None = None) -> SignedEnvelope:
    """Sign the current global parameters into a broadcast envelope."""
    t = timings or PhaseTimings()
    t0 = time.perf_counter()
    payload = codec.encode_params(server.model.params)
    header = codec.build_header(
        MsgType.MODEL_DISTRIBUTION,
        server.keypair.scheme,
        server.model.round,
        SERVER_ID,
        payload,
    )
    to_sign = codec.signed_bytes(header, payload)
    t1 = time.perf_counter()
    signature = sig.sign(server.keypair, to_sign)
    t2 = time.perf_counter()
    t.serialize_s += t1 - t0
    t.sign_s += t2 - t1
    return SignedEnvelope(header=header, payload=payload, signature=signature)


def client_receive_model(
    client: ClientState, env: SignedEnvelope, timings: PhaseTimings | None = None
) -> GlobalModel:
    """Validate and accept a model distribution envelope.

    Raises MalformedEnvelope / WrongSender / ReplayDetected /
    SignatureInvalid, each distinct; on success advances the client's
    accepted-round watermark.
    """
    t = timings or PhaseTimings()
    if env.header.msg_type != MsgType.MODEL_DISTRIBUTION:
        raise MalformedEnvelope(f"expected model distribution, got {env.header.msg_type!r}")
    if env.header.sender_id != SERVER_ID:
        raise WrongSender(f"model distribution from sender {env.header.sender_id}")
    if env.header.round <= client.last_accepted_round:
        raise ReplayDetected(
            f"round {env.header.round} not newer than {client.last_accepted_round}"
        )
    if client.options.verify_models:
        t0 = time.perf_counter()
        ok = sig.verify(
            client.server_public_key,
            client.scheme,
            codec.signed_bytes(env.header, env.payload),
            env.signature,
        )
        t.verify_s += time.perf_counter() - t0
        if not ok:
            raise SignatureInvalid("model distribution signature rejected")
    t0 = time.perf_counter()
    try:
        params = codec.decode_params(env.payload)
    except (MalformedPayload, NonFiniteValue) as exc:
        raise MalformedEnvelope(f"model payload: {exc}") from exc
    t.serialize_s += time.perf_counter() - t0
    if params.size != client.architecture.param_count:
        raise MalformedEnvelope(
            f"model payload has {params.size} params, expected {client.architecture.param_count}"
        )
    model = GlobalModel(params=params, architecture=client.architecture, round=env.header.round)
    client.last_accepted_round = env.header.round
    client.current_model = model
    return model


def client_submit_update(
    client: ClientState, update: ModelUpdate, timings: PhaseTimings | None = None
) -> SignedEnvelope:
    """Wrap a local update in a signed submission envelope."""
    t = timings or PhaseTimings()
    if update.round != client.last_accepted_round:
        raise ReplayDetected(
            f"update round {update.round} != current round {client.last_accepted_round}"
        )
    t0 = time.perf_counter()
    payload = codec.encode_params(update.delta)
    header = codec.build_header(
        MsgType.UPDATE_SUBMISSION,
        client.keypair.scheme,
        update.round,
        client.client_id,
        payload,
    )
    to_sign = codec.signed_bytes(header, payload)
    t1 = time.perf_counter()
    signature = sig.sign(client.keypair, to_sign)
    t2 = time.perf_counter()
    t.serialize_s += t1 - t0
    t.sign_s += t2 - t1
    return SignedEnvelope(header=header, payload=payload, signature=signature)


@dataclass
class ClientRoundResult:
    reply: bytes | None
    timings: PhaseTimings
    skipped: str | None = None  # reason text when the client sat out


def client_process_round(client: ClientState, env_blob: bytes) -> ClientRoundResult:
    """One full client round over wire bytes: decode, verify, train, submit.

    A client that cannot validate the incoming model sits the round out
    and reports why instead of raising.
    """
    t = PhaseTimings()
    t0 = time.perf_counter()
    try:
        env = codec.decode_envelope(env_blob)
    except MalformedEnvelope as exc:
        return ClientRoundResult(reply=None, timings=t, skipped=f"malformed: {exc}")
    t.serialize_s += time.perf_counter() - t0

    try:
        model = client_receive_model(client, env, timings=t)
    except (MalformedEnvelope, WrongSender, ReplayDetected, SignatureInvalid) as exc:
        log.info("client %d sitting out: %s", client.client_id, exc)
        return ClientRoundResult(reply=None, timings=t, skipped=str(exc))

    t0 = time.perf_counter()
    update = fedcore.local_train(
        model,
        client.dataset,
        client.cfg,
        train_seed(client.cfg.seed, model.round, client.client_id),
        client.client_id,
    )
    t.train_s += time.perf_counter() - t0

    env_out = client_submit_update(client, update, timings=t)
    t0 = time.perf_counter()
    blob = codec.encode_envelope(env_out)
    t.serialize_s += time.perf_counter() - t0
    return ClientRoundResult(reply=blob, timings=t)


def server_collect_and_verify(
    server: ServerState,
    envelope_blobs: list[bytes],
    timings: PhaseTimings | None = None,
) -> tuple[list[ModelUpdate], list[Rejection], int, int]:
    """Filter raw submission bytes down to the verified update set.

    Returns (verified updates, rejections, payload_bytes, signature_bytes);
    rejection is data, never an exception. At most one update per client
    enters the set (first valid wins).
    """
    t = timings or PhaseTimings()
    verified: list[ModelUpdate] = []
    rejections: list[Rejection] = []
    accepted_ids: set[int] = set()
    payload_bytes = 0
    signature_bytes = 0

    for blob in envelope_blobs:
        t0 = time.perf_counter()
        try:
            env = codec.decode_envelope(blob)
        except MalformedEnvelope as exc:
            t.serialize_s += time.perf_counter() - t0
            rejections.append(Rejection(None, RejectReason.MALFORMED, str(exc)))
            continue
        t.serialize_s += time.perf_counter() - t0
        payload_bytes += len(env.payload)
        signature_bytes += len(env.signature.data)
        sender = env.header.sender_id

        if env.header.msg_type != MsgType.UPDATE_SUBMISSION:
            rejections.append(
                Rejection(sender, RejectReason.MALFORMED, f"msg_type {env.header.msg_type!r}")
            )
            continue
        if sender == SERVER_ID or sender not in server.registry:
            rejections.append(Rejection(sender, RejectReason.UNKNOWN_SENDER))
            continue
        if server.options.enforce_round_binding and env.header.round != server.model.round:
            rejections.append(
                Rejection(
                    sender,
                    RejectReason.STALE_ROUND,
                    f"round {env.header.round} != {server.model.round}",
                )
            )
            continue

        if server.options.verify_updates:
            scheme, public_key = server.registry.public_key(sender)
            t0 = time.perf_counter()
            ok = sig.verify(
                public_key,
                scheme,
                codec.signed_bytes(env.header, env.payload),
                env.signature,
            )
            t.verify_s += time.perf_counter() - t0
            if not ok:
                rejections.append(Rejection(sender, RejectReason.SIGNATURE_INVALID))
                continue

        if sender in accepted_ids:
            rejections.append(Rejection(sender, RejectReason.DUPLICATE))
            continue

        t0 = time.perf_counter()
        try:
            delta = codec.decode_params(env.payload)
        except NonFiniteValue as exc:
            rejections.append(Rejection(sender, RejectReason.NON_FINITE, str(exc)))
            continue
        except MalformedPayload as exc:
            rejections.append(Rejection(sender, RejectReason.MALFORMED, str(exc)))
            continue
        finally:
            t.serialize_s += time.perf_counter() - t0
        if delta.size != server.model.architecture.param_count:
            rejections.append(
                Rejection(sender, RejectReason.MALFORMED, f"delta size {delta.size}")
            )
            continue

        accepted_ids.add(sender)
        verified.append(
            ModelUpdate(delta=delta, client_id=sender, round=env.header.round)
        )

    return verified, rejections, payload_bytes, signature_bytes


def finish_round(
    server: ServerState,
    collected: list[bytes],
    dist_env: SignedEnvelope,
    client_timings: PhaseTimings,
    skipped_clients: list[int],
    wall_start: float,
) -> RoundOutcome:
    """Server half of round completion: verify, aggregate, measure."""
    t = PhaseTimings()
    verified, rejections, payload_bytes, signature_bytes = server_collect_and_verify(
        server, collected, timings=t
    )
    if verified:
        server.model = fedcore.aggregate(server.model, verified)
    else:
        log.warning("round %d: empty verified set, parameters unchanged", server.model.round)
        server.model = replace(server.model, round=server.model.round + 1)

    loss = (
        fedcore.forward_loss(server.model, server.eval_data)
        if server.eval_data is not None
        else float("nan")
    )
    t.add(client_timings)
    t.wall_s = time.perf_counter() - wall_start
    return RoundOutcome(
        round=server.model.round - 1,
        updates_received=len(verified) + len(rejections),
        verified_count=len(verified),
        rejections=rejections,
        skipped_clients=skipped_clients,
        global_loss=loss,
        timings=t,
        payload_bytes=payload_bytes + len(dist_env.payload),
        signature_bytes=signature_bytes + len(dist_env.signature.data),
    )


def run_round(
    server: ServerState,
    clients: list[ClientState],
    chan: _channel.Channel,
) -> RoundOutcome:
    """Execute one round over the in-process channel."""
    wall_start = time.perf_counter()
    server_t = PhaseTimings()
    dist_env = distribute_model(server, timings=server_t)
    t0 = time.perf_counter()
    dist_blob = codec.encode_envelope(dist_env)
    server_t.serialize_s += time.perf_counter() - t0

    client_totals = PhaseTimings()
    client_totals.add(server_t)
    collected: list[bytes] = []
    skipped: list[int] = []
    for client in clients:
        delivered = chan.deliver(dist_blob, _channel.Direction.SERVER_TO_CLIENT, client.client_id)
        result = client_process_round(client, delivered)
        client_totals.add(result.timings)
        if result.reply is None:
            skipped.append(client.client_id)
            continue
        collected.append(
            chan.deliver(result.reply, _channel.Direction.CLIENT_TO_SERVER, client.client_id)
        )

    return finish_round(server, collected, dist_env, client_totals, skipped, wall_start)


@dataclass
class TrainingResult:
    model: GlobalModel
    outcomes: list[RoundOutcome]


def run_training(
    server: ServerState,
    clients: list[ClientState],
    chan: _channel.Channel | None = None,
) -> TrainingResult:
    """Run the configured number of rounds over the in-process channel."""
    chan = chan or _channel.Channel()
    outcomes = []
    for _ in range(server.cfg.num_rounds):
        outcome = run_round(server, clients, chan)
        outcomes.append(outcome)
        log.info(
            "round %d: verified=%d rejected=%d loss=%.6f",
            outcome.round,
            outcome.verified_count,
            len(outcome.rejections),
            outcome.global_loss,
        )
    return TrainingResult(model=server.model, outcomes=outcomes)


# --- loopback / network TCP execution -----------------------------------------

def _make_announce(client: ClientState) -> SignedEnvelope:
    payload = client.keypair.public_key
    header = codec.build_header(
        MsgType.PUBLIC_KEY_ANNOUNCE, client.scheme, 0, client.client_id, payload
    )
    signature = sig.sign(client.keypair, codec.signed_bytes(header, payload))
    return SignedEnvelope(header=header, payload=payload, signature=signature)


def _check_announce(server: ServerState, blob: bytes) -> int:
    """Map an incoming connection to a registered client id, or fail the run.

    The registry is the trust anchor: the announced key must byte-match it.
    """
    try:
        env = codec.decode_envelope(blob)
    except MalformedEnvelope as exc:
        raise ConnectionFailed(f"bad announce: {exc}") from exc
    sender = env.header.sender_id
    if env.header.msg_type != MsgType.PUBLIC_KEY_ANNOUNCE or sender not in server.registry:
        raise ConnectionFailed(f"announce from unknown participant {sender}")
    scheme, registered_pk = server.registry.public_key(sender)
    if env.payload != registered_pk:
        raise ConnectionFailed(f"announced key for client {sender} does not match registry")
    if not sig.verify(registered_pk, scheme, codec.signed_bytes(env.header, env.payload), env.signature):
        raise ConnectionFailed(f"announce signature from client {sender} rejected")
    return sender


def run_training_tcp(
    server: ServerState,
    clients: list[ClientState],
    chan: _channel.Channel | None = None,
    host: str = "127.0.0.1",
    port: int = 0,
    max_frame: int = _channel.DEFAULT_FRAME_CAP,
) -> TrainingResult:
    """Run training with one TCP connection per client over the codec's
    wire format. Client loops run on their own threads; a dropped
    connection is fatal for the run."""
    chan = chan or _channel.Channel()
    listener = _channel.tcp_listen(host, port)
    bound_host, bound_port = listener.getsockname()[:2]
    num_rounds = server.cfg.num_rounds

    lock = threading.Lock()
    round_timings: dict[tuple[int, int], PhaseTimings] = {}
    failures: list[Exception] = []

    def client_main(client: ClientState) -> None:
        try:
            fs = _channel.tcp_connect(bound_host, bound_port, max_frame)
            try:
                fs.send_frame(codec.encode_envelope(_make_announce(client)))
                for rnd in range(num_rounds):
                    blob = fs.recv_frame()
                    blob = chan.deliver(blob, _channel.Direction.SERVER_TO_CLIENT, client.client_id)
                    result = client_process_round(client, blob)
                    with lock:
                        round_timings[(rnd, client.client_id)] = result.timings
                    fs.send_frame(result.reply or b"")
            finally:
                fs.close()
        except Exception as exc:  # surfaced after join
            with lock:
                failures.append(exc)

    threads = [
        threading.Thread(target=client_main, args=(c,), daemon=True) for c in clients
    ]
    for th in threads:
        th.start()

    outcomes: list[RoundOutcome] = []
    try:
        conns: dict[int, _channel.FrameSocket] = {}
        for _ in clients:
            fs = _channel.tcp_accept(listener, max_frame)
            conns[_check_announce(server, fs.recv_frame())] = fs
        listener.close()

        for rnd in range(num_rounds):
            wall_start = time.perf_counter()
            totals = PhaseTimings()
            dist_env = distribute_model(server, timings=totals)
            t0 = time.perf_counter()
            dist_blob = codec.encode_envelope(dist_env)
            totals.serialize_s += time.perf_counter() - t0

            for cid in sorted(conns):
                conns[cid].send_frame(dist_blob)

            collected: list[bytes] = []
            skipped: list[int] = []
            for cid in sorted(conns):
                blob = conns[cid].recv_frame()
                if blob:
                    collected.append(
                        chan.deliver(blob, _channel.Direction.CLIENT_TO_SERVER, cid)
                    )
                else:
                    skipped.append(cid)
            with lock:
                for cid in sorted(conns):
                    extra = round_timings.pop((rnd, cid), None)
                    if extra is not None:
                        totals.add(extra)
            outcomes.append(
                finish_round(server, collected, dist_env, totals, skipped, wall_start)
            )
        for fs in conns.values():
            fs.close()
    finally:
        for th in threads:
            th.join(timeout=60)
    if failures:
        raise failures[0]
    return TrainingResult(model=server.model, outcomes=outcomes)
