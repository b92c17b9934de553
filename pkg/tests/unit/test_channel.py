"""Unit tests for queue and socket channels."""

import socket

import pytest

from armfleet.core.channel import (
    ChannelClosedError,
    ChannelTimeoutError,
    SocketChannel,
    parse_address,
    queue_channel_pair,
)
from armfleet.core.errors import ConfigError
from armfleet.core.protocol import Frame, MsgType


class TestParseAddress:
    def test_host_and_port(self):
        assert parse_address("10.0.0.5:7000") == ("10.0.0.5", 7000)

    def test_empty_host_means_localhost(self):
        assert parse_address(":7000") == ("127.0.0.1", 7000)

    @pytest.mark.parametrize("address", ["localhost", "host:port", "host:70000"])
    def test_invalid(self, address):
        with pytest.raises(ConfigError):
            parse_address(address)


class TestQueueChannel:
    """Test the in-process channel pair."""

    def test_frames_arrive_in_order(self):
        coordinator, worker = queue_channel_pair()
        coordinator.send(Frame(MsgType.PARAMS, b"1"))
        coordinator.send(Frame(MsgType.SHUTDOWN))
        assert worker.receive(timeout=1) == Frame(MsgType.PARAMS, b"1")
        assert worker.receive(timeout=1) == Frame(MsgType.SHUTDOWN)

    def test_both_directions(self):
        coordinator, worker = queue_channel_pair()
        worker.send(Frame(MsgType.HELLO, b"hi"))
        assert coordinator.receive(timeout=1).payload == b"hi"

    def test_timeout(self):
        coordinator, _ = queue_channel_pair()
        with pytest.raises(ChannelTimeoutError):
            coordinator.receive(timeout=0.01)

    def test_close_reaches_peer(self):
        coordinator, worker = queue_channel_pair()
        coordinator.close()
        with pytest.raises(ChannelClosedError):
            worker.receive(timeout=1)
        with pytest.raises(ChannelClosedError):
            worker.send(Frame(MsgType.ACK))

    def test_send_after_close(self):
        coordinator, _ = queue_channel_pair()
        coordinator.close()
        with pytest.raises(ChannelClosedError):
            coordinator.send(Frame(MsgType.ACK))


class TestSocketChannel:
    """Test framing over a connected socket pair."""

    @pytest.fixture
    def pair(self):
        a, b = socket.socketpair()
        left, right = SocketChannel(a), SocketChannel(b)
        yield left, right
        left.close()
        right.close()

    def test_round_trip(self, pair):
        left, right = pair
        payload = bytes(range(256)) * 100
        left.send(Frame(MsgType.LOCAL_MODEL, payload))
        left.send(Frame(MsgType.ACK, b"x"))
        assert right.receive(timeout=5) == Frame(MsgType.LOCAL_MODEL, payload)
        assert right.receive(timeout=5) == Frame(MsgType.ACK, b"x")

    def test_timeout(self, pair):
        _, right = pair
        with pytest.raises(ChannelTimeoutError):
            right.receive(timeout=0.05)

    def test_peer_close(self, pair):
        left, right = pair
        left.close()
        with pytest.raises(ChannelClosedError):
            right.receive(timeout=5)
