"""Privacy-preserving overlay for geo-referenced vehicle events.

Clients publish events under rotating pseudonymous EIDs with short-lived
certificates from a CA; a mapping agent admits and audits them and an
aggregation agent rolls them up per hex tile and time window.
"""

__version__ = "0.1.0"
