"""Modular firmware updates verified with chameleon-hash chains."""

from .chameleon import (
    TOY_KEYPAIR,
    ChameleonDigest,
    ChameleonKeyPair,
    chash,
    find_collision,
    keygen,
    verify_pair,
)
from .device import DeviceState, factory_init, functional_verify, install, security_verify
from .firmware import (
    Checkpoint,
    FilledBlock,
    FirmwareImage,
    ImageKind,
    VerificationChain,
    aggregate_block_info,
    init_firmware,
    iterate_version,
    security_update,
)
from .package import (
    CryptoModule,
    CryptoPool,
    FunctionalModule,
    ModuleCatalog,
    ModuleKind,
    gen_crypto_modules,
    package_fmodule,
)
from .pow import PowChallenge, PowSolution, solve, verify
from .server import DistributionServer, ServerMetrics

__version__ = "0.1.0"
