"""peerwatch: simulate P2P gossip/discovery attacks and detect them from
victim-side event sequences with an LSTM next-event forecaster."""

__version__ = "0.1.0"
