import struct

import pytest

from oracles import reference_hkdf
from trctee import channel, puf, transport, ttp, vtpm
from trctee.crypto import Rng


def make_session(threshold=1024, key=None, peer=channel.Role.TMM, enforce=True):
    return channel.SessionState(
        sess_key=key or Rng(1).bytes(32),
        peer_role=peer,
        rekey_threshold=threshold,
        enforce_rekey=enforce,
    )


def session_pair(threshold=1024):
    key = Rng(2).bytes(32)
    vtpm_side = make_session(threshold, key=key, peer=channel.Role.TMM)
    tmm_side = make_session(threshold, key=key, peer=channel.Role.VTPM, enforce=False)
    return vtpm_side, tmm_side


class TestFraming:
    def test_seal_open_round_trip(self):
        sender, receiver = session_pair()
        frame = channel.seal(sender, b"hello tmm")
        assert channel.open_frame(receiver, frame.encode()) == b"hello tmm"

    def test_overhead_is_exactly_40_bytes(self):
        for size in (0, 1, 13, 255, 4096):
            sender, _ = session_pair()
            frame = channel.seal(sender, bytes(size))
            assert len(frame.encode()) == size + 40
            assert channel.FRAME_OVERHEAD == 40

    def test_tampered_ciphertext_auth_failure(self):
        sender, receiver = session_pair()
        encoded = bytearray(channel.seal(sender, b"payload").encode())
        encoded[-1] ^= 0x01
        with pytest.raises(channel.AuthFailure):
            channel.open_frame(receiver, bytes(encoded))

    def test_tampered_counter_auth_failure_and_no_state_change(self):
        sender, receiver = session_pair()
        frame = channel.seal(sender, b"payload")
        forged = struct.pack(">IQ", frame.epoch, frame.counter + 1) + frame.nonce + frame.ciphertext
        with pytest.raises(channel.AuthFailure):
            channel.open_frame(receiver, forged)
        assert receiver.recv_counter == 0

    def test_replay_detected(self):
        sender, receiver = session_pair()
        encoded = channel.seal(sender, b"once").encode()
        channel.open_frame(receiver, encoded)
        with pytest.raises(channel.ReplayDetected):
            channel.open_frame(receiver, encoded)

    def test_out_of_order_counter_rejected(self):
        sender, receiver = session_pair()
        first = channel.seal(sender, b"1").encode()
        second = channel.seal(sender, b"2").encode()
        channel.open_frame(receiver, second)
        with pytest.raises(channel.ReplayDetected):
            channel.open_frame(receiver, first)

    def test_wrong_epoch(self):
        sender, receiver = session_pair()
        old = channel.seal(sender, b"stale").encode()
        receiver.switch_epoch(Rng(3).bytes(32))
        with pytest.raises(channel.WrongEpoch):
            channel.open_frame(receiver, old)

    def test_direction_bound_nonces(self):
        # A frame reflected back to its sender must not open.
        sender, receiver = session_pair()
        encoded = channel.seal(sender, b"mirror").encode()
        with pytest.raises(channel.AuthFailure):
            channel.open_frame(sender, encoded)


class TestCounters:
    def test_rekey_required_at_threshold(self):
        sender, _ = session_pair(threshold=4)
        for _ in range(4):
            channel.seal(sender, b"x")
        with pytest.raises(channel.RekeyRequired):
            channel.seal(sender, b"one too many")

    def test_counter_tick_fires_on_fourth_frame(self):
        sender, _ = session_pair(threshold=4)
        fired = []
        for _ in range(4):
            channel.seal(sender, b"x")
            fired.append(channel.counter_tick(sender))
        assert fired == [False, False, False, True]

    def test_threshold_zero_rejected(self):
        with pytest.raises(ValueError):
            make_session(threshold=0)

    def test_counting_restarts_after_epoch_switch(self):
        sender, _ = session_pair(threshold=4)
        for _ in range(4):
            channel.seal(sender, b"x")
        sender.switch_epoch(Rng(4).bytes(32))
        assert sender.send_counter == 0 and not channel.counter_tick(sender)
        channel.seal(sender, b"fresh epoch")


def handshake_fixtures(seed=21, crp_count=8):
    rng = Rng(seed)
    service = ttp.TtpService(rng=rng.child("ttp"))
    service.register_user("alice")
    bundle = service.enroll_vtpm("alice")
    device_puf = puf.PufDevice(rng.child("puf").bytes(32))
    crps = puf.enroll(device_puf, crp_count, rng.child("enroll"))
    crps.owner = "user"
    return service, bundle, device_puf, crps, rng


def run_handshake(bundle, crps, device_puf, pk_ttp, rng, device_id="dev1"):
    initiator = channel.VtpmHandshake(
        sk_tpm=bundle.sk_tpm,
        cert=bundle.cert,
        pk_ttp=pk_ttp,
        device_id=device_id,
        crp_store=crps,
        rng=rng.child("hs-user"),
    )
    responder = channel.DeviceHandshake(
        pk_ttp=pk_ttp,
        device_id=device_id,
        puf=device_puf,
        rng=rng.child("hs-device"),
    )
    message = initiator.start()
    while initiator.session is None or responder.session is None:
        message = responder.on_message(message)
        if message is None:
            break
        message = initiator.on_message(message)
    return initiator, responder


class TestHandshake:
    def test_honest_run_keys_equal(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        initiator, responder = run_handshake(bundle, crps, device_puf, service.pk_ttp, rng)
        assert initiator.session is not None and responder.session is not None
        assert initiator.session.sess_key == responder.session.sess_key
        assert initiator.session.epoch == 0 and responder.session.epoch == 0

    def test_one_crp_consumed(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        before = crps.unused_count()
        run_handshake(bundle, crps, device_puf, service.pk_ttp, rng)
        assert crps.unused_count() == before - 1

    def test_bitflipped_cert_rejected(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        sig = bundle.cert.signature
        bad_cert = ttp.Certificate(
            user_id=bundle.cert.user_id,
            pk_tpm=bundle.cert.pk_tpm,
            signature=sig[:-1] + bytes([sig[-1] ^ 1]),
        )
        initiator = channel.VtpmHandshake(
            sk_tpm=bundle.sk_tpm,
            cert=bad_cert,
            pk_ttp=service.pk_ttp,
            device_id="dev1",
            crp_store=crps,
            rng=rng.child("hs-user"),
        )
        responder = channel.DeviceHandshake(
            pk_ttp=service.pk_ttp, device_id="dev1", puf=device_puf, rng=rng.child("hs-device")
        )
        with pytest.raises(channel.BadCert):
            responder.on_message(initiator.start())
        assert responder.session is None

    def test_swapped_cert_fails_at_signature(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        service.register_user("mallory")
        other = service.enroll_vtpm("mallory")
        initiator = channel.VtpmHandshake(
            sk_tpm=bundle.sk_tpm,  # honest key, mallory's cert
            cert=other.cert,
            pk_ttp=service.pk_ttp,
            device_id="dev1",
            crp_store=crps,
            rng=rng.child("hs-user"),
        )
        responder = channel.DeviceHandshake(
            pk_ttp=service.pk_ttp, device_id="dev1", puf=device_puf, rng=rng.child("hs-device")
        )
        hs2 = responder.on_message(initiator.start())
        hs3 = initiator.on_message(hs2)
        with pytest.raises(channel.BadCert):
            responder.on_message(hs3)

    def test_malicious_device_puf_mismatch(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        impostor = puf.PufDevice(Rng(999).bytes(32))  # wrong fabrication secret
        initiator = channel.VtpmHandshake(
            sk_tpm=bundle.sk_tpm,
            cert=bundle.cert,
            pk_ttp=service.pk_ttp,
            device_id="dev1",
            crp_store=crps,
            rng=rng.child("hs-user"),
        )
        responder = channel.DeviceHandshake(
            pk_ttp=service.pk_ttp, device_id="dev1", puf=impostor, rng=rng.child("hs-device")
        )
        hs2 = responder.on_message(initiator.start())
        hs3 = initiator.on_message(hs2)
        hs5 = responder.on_message(hs3)
        with pytest.raises(channel.PufMismatch):
            initiator.on_message(hs5)
        assert initiator.session is None

    def test_replayed_message_stale(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        initiator = channel.VtpmHandshake(
            sk_tpm=bundle.sk_tpm,
            cert=bundle.cert,
            pk_ttp=service.pk_ttp,
            device_id="dev1",
            crp_store=crps,
            rng=rng.child("hs-user"),
        )
        responder = channel.DeviceHandshake(
            pk_ttp=service.pk_ttp, device_id="dev1", puf=device_puf, rng=rng.child("hs-device")
        )
        hs1 = initiator.start()
        responder.on_message(hs1)
        with pytest.raises(channel.StaleNonce):
            responder.on_message(hs1)

    def test_wrong_device_id_rejected(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures()
        initiator = channel.VtpmHandshake(
            sk_tpm=bundle.sk_tpm,
            cert=bundle.cert,
            pk_ttp=service.pk_ttp,
            device_id="dev1",
            crp_store=crps,
            rng=rng.child("hs-user"),
        )
        responder = channel.DeviceHandshake(
            pk_ttp=service.pk_ttp, device_id="dev2", puf=device_puf, rng=rng.child("hs-device")
        )
        hs2 = responder.on_message(initiator.start())
        with pytest.raises(channel.ChannelError):
            initiator.on_message(hs2)


def connected_endpoints(threshold=1024):
    """Two live endpoints over an in-process pipe with a real handshake."""
    service, bundle, device_puf, crps, rng = handshake_fixtures()
    initiator, responder = run_handshake(bundle, crps, device_puf, service.pk_ttp, rng)
    initiator.session.rekey_threshold = threshold
    responder.session.rekey_threshold = threshold
    a, b = transport.pipe_pair()
    vtpm_end = channel.ChannelEndpoint(initiator.session, a, recv_timeout=2.0)
    tmm_end = channel.ChannelEndpoint(responder.session, b, recv_timeout=2.0)
    return vtpm_end, tmm_end, crps, device_puf


class TestKeyUpdate:
    def _run_update(self, vtpm_end, tmm_end, crps, device_puf, bank=None):
        import threading

        bank = bank or vtpm.PcrBank()
        record = crps.take_unused()
        state_hash = bank.state_hash()
        device_side = threading.Thread(
            target=lambda: channel.respond_update(tmm_end, tmm_end.recv(), device_puf)
        )
        device_side.start()
        channel.initiate_update(vtpm_end, record.challenge, record.response, state_hash)
        device_side.join(timeout=5)
        return record, state_hash

    def test_honest_update_keys_equal(self):
        vtpm_end, tmm_end, crps, device_puf = connected_endpoints()
        old_key = vtpm_end.session.sess_key
        record, state_hash = self._run_update(vtpm_end, tmm_end, crps, device_puf)
        assert vtpm_end.session.sess_key == tmm_end.session.sess_key != old_key
        assert vtpm_end.session.epoch == tmm_end.session.epoch == 1
        assert vtpm_end.session.send_counter == 0

    def test_derived_key_matches_reference_kdf(self):
        vtpm_end, tmm_end, crps, device_puf = connected_endpoints()
        old_key = vtpm_end.session.sess_key
        record, state_hash = self._run_update(vtpm_end, tmm_end, crps, device_puf)
        expected = reference_hkdf(
            ikm=record.response + old_key,
            salt=state_hash,
            info=b"trctee-rekey" + struct.pack(">I", 1),
            length=32,
        )
        assert vtpm_end.session.sess_key == expected

    def test_old_epoch_frame_rejected_after_update(self):
        vtpm_end, tmm_end, crps, device_puf = connected_endpoints()
        stale = channel.seal(vtpm_end.session, b"stale").encode()
        vtpm_end.session.send_counter -= 1  # pretend it was never sent
        self._run_update(vtpm_end, tmm_end, crps, device_puf)
        with pytest.raises(channel.WrongEpoch):
            channel.open_frame(tmm_end.session, stale)

    def test_pcr_state_binds_key(self):
        # Identical response, old key, and epoch; only one PCR differs.
        response, old_key = Rng(41).bytes(32), Rng(42).bytes(32)
        bank1, bank2 = vtpm.PcrBank(), vtpm.PcrBank()
        bank2.extend(1, bytes(range(48)))
        key1, _ = channel.derive_updated_key(bank1.state_hash(), response, old_key, 1)
        key2, _ = channel.derive_updated_key(bank2.state_hash(), response, old_key, 1)
        assert key1 != key2

    def test_pcr_state_binds_key_end_to_end(self):
        vtpm_end, tmm_end, crps, device_puf = connected_endpoints()
        bank = vtpm.PcrBank()
        bank.extend(1, bytes(range(48)))
        record, state_hash = self._run_update(vtpm_end, tmm_end, crps, device_puf, bank=bank)
        derived_with_reset_bank = channel.derive_updated_key(
            vtpm.PcrBank().state_hash(), record.response, bytes(32), 1
        )[0]
        assert vtpm_end.session.sess_key == tmm_end.session.sess_key
        assert vtpm_end.session.sess_key != derived_with_reset_bank

    def test_total_crps_consumed_equals_handshakes_plus_updates(self):
        service, bundle, device_puf, crps, rng = handshake_fixtures(crp_count=8)
        total = len(crps)
        initiator, responder = run_handshake(bundle, crps, device_puf, service.pk_ttp, rng)
        a, b = transport.pipe_pair()
        vtpm_end = channel.ChannelEndpoint(initiator.session, a, recv_timeout=2.0)
        tmm_end = channel.ChannelEndpoint(responder.session, b, recv_timeout=2.0)
        updates = 3
        for _ in range(updates):
            self._run_update(vtpm_end, tmm_end, crps, device_puf)
        consumed = total - crps.unused_count()
        assert consumed == 1 + updates  # one handshake + the updates
