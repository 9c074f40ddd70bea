"""trctee: a desk-scale simulation of a TPM 2.0-backed runtime-customizable
TEE on an FPGA-SoC, driven by a user-controllable vTPM.

The pieces: a bit-exact TPM wire codec with three extension commands
(:mod:`trctee.wire`), the vTPM engine with its PCR bank and event log
(:mod:`trctee.vtpm`), a deterministic SRAM-PUF model (:mod:`trctee.puf`),
the trusted third party (:mod:`trctee.ttp`), the mutually-authenticated
rekeying channel (:mod:`trctee.channel`), the simulated device with its
TMM (:mod:`trctee.device`), end-to-end orchestration and the offline
verifier (:mod:`trctee.runtime`), and the scenario runner / CLI
(:mod:`trctee.scenario`, :mod:`trctee.cli`).
"""

__version__ = "0.1.0"
