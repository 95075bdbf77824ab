"""Remote API client against a local stub server replaying canned fixtures."""

from __future__ import annotations

import json
import threading
from datetime import datetime, timedelta, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import pytest

from mefcast.errors import AuthenticationError, ConfigError, DecodeError, TransportError
from mefcast.ingest import API_KEY_ENV, FetchConfig, fetch_remote

T0 = datetime(2023, 1, 1, tzinfo=timezone.utc)
HOUR = timedelta(hours=1)


def make_rows(n: int) -> list[dict]:
    rows = []
    for i in range(n):
        stamp = T0 + i * HOUR
        rows.append(
            {
                "period": stamp.strftime("%Y-%m-%dT%H"),
                "respondent": "CISO",
                "demand_mwh": 20000.0 + i,
                "demand_forecast_mwh": 20100.0 + i,
                "net_imports_mwh": -500.0,
                "co2_tonnes": 4000.0 + 0.5 * i,
                "generation_mwh": {"natural_gas": 9000.0, "solar": 100.0 + i % 7},
            }
        )
    return rows


class _StubHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_GET(self):
        server = self.server
        server.request_count += 1
        query = parse_qs(urlparse(self.path).query)
        status, body = server.behavior(server, query)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body if isinstance(body, bytes) else body.encode("utf-8"))


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    server.request_count = 0
    server.rows = make_rows(0)
    server.behavior = paged_behavior
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield server, f"http://127.0.0.1:{server.server_port}/hourly"
    finally:
        server.shutdown()
        thread.join()


def paged_behavior(server, query):
    offset = int(query.get("offset", ["0"])[0])
    length = int(query.get("length", ["5000"])[0])
    page = server.rows[offset : offset + length]
    # Serve each page newest-first; the client must sort before returning.
    body = {"response": {"total": len(server.rows), "data": list(reversed(page))}}
    return 200, json.dumps(body)


def fetch_config(url: str, hours: int = 24, **kwargs) -> FetchConfig:
    defaults = dict(
        base_url=url,
        region="CISO",
        start=T0,
        end=T0 + hours * HOUR,
        api_key="test-key",
        backoff_seconds=0.01,
    )
    defaults.update(kwargs)
    return FetchConfig(**defaults)


class TestFetchRemote:
    def test_two_pages_merged_sorted(self, stub_server):
        server, url = stub_server
        server.rows = make_rows(10000)
        rows = fetch_remote(fetch_config(url, hours=10000))
        assert len(rows) == 10000
        stamps = [obs.timestamp for obs in rows]
        assert stamps == sorted(stamps)
        assert stamps[0] == T0 and stamps[-1] == T0 + 9999 * HOUR
        assert server.request_count == 2
        assert rows[17].demand == 20017.0

    def test_empty_range_makes_no_requests(self, stub_server):
        server, url = stub_server
        rows = fetch_remote(fetch_config(url, hours=0))
        assert rows == []
        assert server.request_count == 0

    def test_empty_key_fails_before_any_request(self, stub_server, monkeypatch):
        server, url = stub_server
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        with pytest.raises(AuthenticationError):
            fetch_remote(fetch_config(url, api_key=""))
        assert server.request_count == 0

    def test_key_from_environment(self, stub_server, monkeypatch):
        server, url = stub_server
        server.rows = make_rows(5)
        monkeypatch.setenv(API_KEY_ENV, "env-key")
        rows = fetch_remote(fetch_config(url, hours=5, api_key=""))
        assert len(rows) == 5

    def test_reversed_range_is_usage_error(self, stub_server):
        _, url = stub_server
        with pytest.raises(ConfigError):
            fetch_remote(fetch_config(url, hours=24, start=T0 + HOUR, end=T0))

    def test_http_401_is_authentication_error(self, stub_server):
        server, url = stub_server
        server.behavior = lambda s, q: (401, "{}")
        with pytest.raises(AuthenticationError):
            fetch_remote(fetch_config(url))

    def test_non_json_body_is_decode_error(self, stub_server):
        server, url = stub_server
        server.behavior = lambda s, q: (200, "<html>not json</html>")
        with pytest.raises(DecodeError, match="offset 0"):
            fetch_remote(fetch_config(url))

    def test_schema_mismatch_is_decode_error(self, stub_server):
        server, url = stub_server
        server.behavior = lambda s, q: (200, json.dumps({"unexpected": []}))
        with pytest.raises(DecodeError, match="offset 0"):
            fetch_remote(fetch_config(url))

    def test_bad_row_is_decode_error(self, stub_server):
        server, url = stub_server
        body = {"response": {"total": 1, "data": [{"period": "2023-01-01T00"}]}}
        server.behavior = lambda s, q: (200, json.dumps(body))
        with pytest.raises(DecodeError):
            fetch_remote(fetch_config(url))

    def test_transient_500_retried(self, stub_server):
        server, url = stub_server
        server.rows = make_rows(3)

        def flaky(srv, query):
            if srv.request_count <= 2:
                return 500, "{}"
            return paged_behavior(srv, query)

        server.behavior = flaky
        rows = fetch_remote(fetch_config(url, hours=3))
        assert len(rows) == 3
        assert server.request_count == 3

    def test_persistent_500_exhausts_retries(self, stub_server):
        server, url = stub_server
        server.behavior = lambda s, q: (500, "{}")
        with pytest.raises(TransportError, match="3 attempts"):
            fetch_remote(fetch_config(url))
        assert server.request_count == 3

    def test_null_values_become_sentinels(self, stub_server):
        server, url = stub_server
        row = {
            "period": "2023-01-01T00",
            "respondent": "CISO",
            "demand_mwh": None,
            "demand_forecast_mwh": None,
            "net_imports_mwh": None,
            "co2_tonnes": 10.0,
            "generation_mwh": {},
        }
        server.behavior = lambda s, q: (200, json.dumps({"response": {"total": 1, "data": [row]}}))
        obs = fetch_remote(fetch_config(url, hours=1))[0]
        import math

        assert math.isnan(obs.demand)
        assert obs.demand_forecast is None
        assert obs.co2 == 10.0
