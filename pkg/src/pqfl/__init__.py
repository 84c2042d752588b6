"""Federated averaging protected by post-quantum digital signatures.

Modules:
    sig       pluggable signature schemes (Dilithium, Falcon, SPHINCS+, test)
    codec     canonical wire serialization
    fedcore   datasets, local training, aggregation
    protocol  signed model distribution / verified update aggregation
    channel   in-process and TCP transports with attack injection
    bench     timing/size metrics and reports
    cli       command-line entry point
"""

__version__ = "0.1.0"
