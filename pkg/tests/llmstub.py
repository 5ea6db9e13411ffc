"""Scripted chat-completions stub shared by generator and acceptance tests.

The server consumes one scripted action per request: a dict is served as a
JSON body, a (status, body) tuple overrides the status code, bytes are sent
raw, and "timeout" sleeps past the client deadline. When the script runs
dry the server falls back to `default_reply`.
"""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from acraft.dsl import serialize
from acraft.generator import EndpointConfig


def chat_body(content, ptok=10, ctok=20):
    return {
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": ptok, "completion_tokens": ctok},
    }


def spec_reply(spec, prose="I will corrupt the prototypes."):
    return chat_body(f"{prose}\n```attackspec\n{serialize(spec)}\n```\n")


class StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        server = self.server
        length = int(self.headers.get("Content-Length", 0))
        server.requests.append(json.loads(self.rfile.read(length)))
        server.auth_headers.append(self.headers.get("Authorization"))
        action = server.script.pop(0) if server.script else server.default_reply
        if action == "timeout":
            time.sleep(0.8)
            return
        status = 200
        if isinstance(action, tuple):
            status, action = action
        data = action if isinstance(action, bytes) else json.dumps(action).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


def start(default_reply):
    server = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
    server.script = []
    server.requests = []
    server.auth_headers = []
    server.default_reply = default_reply
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


def stop(server):
    server.shutdown()
    server.server_close()


def endpoint_for(server, **overrides) -> EndpointConfig:
    options = {"timeout": 0.25, "backoff": 0.01}
    options.update(overrides)
    return EndpointConfig(
        base_url=f"http://127.0.0.1:{server.server_address[1]}", **options
    )
