import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trctee import device, puf, runtime, transport, ttp
from trctee.crypto import Rng


@dataclass
class World:
    """One enrolled device plus one provisioned user, not yet connected."""

    master: Rng
    ttp: ttp.TtpService
    puf_device: puf.PufDevice
    boot_image: device.BootImage
    device: device.FpgaSocDevice
    user: runtime.UserNode
    thread: object = None


def build_world(
    seed: int = 7,
    rekey_threshold: int = 1024,
    crp_slice: int = 64,
    device_id: str = "dev1",
    user_id: str = "alice",
) -> World:
    master = Rng(seed)
    ttp_service = ttp.TtpService(rng=master.child("ttp"))
    puf_device = puf.PufDevice(master.child(f"puf-{device_id}").bytes(32))
    image = device.BootImage.synthetic(device_id, ttp_service.pk_ttp)
    ttp_service.enroll_device(device_id, puf_device, image)
    ttp_service.register_user(user_id)
    bundle = ttp_service.enroll_vtpm(user_id)
    dev_id, manifest, crps = ttp_service.provision_user(user_id, device_id, crp_slice)
    dev = device.FpgaSocDevice(
        device_id=device_id,
        puf=puf_device,
        boot_image=image,
        rng=master.child(f"device-{device_id}"),
        rekey_threshold=rekey_threshold,
        recv_timeout=2.0,
    )
    user = runtime.UserNode(
        bundle=bundle,
        device_id=dev_id,
        golden_manifest=manifest,
        crp_store=crps,
        rng=master.child("user"),
        rekey_threshold=rekey_threshold,
        recv_timeout=2.0,
    )
    return World(
        master=master,
        ttp=ttp_service,
        puf_device=puf_device,
        boot_image=image,
        device=dev,
        user=user,
    )


def connect_world(world: World) -> None:
    """Boot the device, start its service thread, and run the handshake."""
    world.device.boot()
    user_side, device_side = transport.pipe_pair()
    world.thread = device.serve_in_thread(world.device, device_side)
    world.user.connect(user_side)


@pytest.fixture
def world():
    w = build_world()
    yield w
    if w.user.endpoint is not None:
        w.user.close()


@pytest.fixture
def connected(world):
    connect_world(world)
    return world
