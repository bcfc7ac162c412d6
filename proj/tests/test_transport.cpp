#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <future>
#include <thread>
#include <vector>

#include "fedsim/transport.hpp"

using namespace fedsim;
using namespace std::chrono_literals;

namespace {

Frame make_frame(std::initializer_list<uint8_t> bytes) { return Frame(bytes); }

struct Tap {
  std::mutex mu;
  std::vector<std::tuple<int, int, size_t>> events;

  FrameObserver observer() {
    return [this](int from, int to, const Frame& f) {
      std::lock_guard<std::mutex> lock(mu);
      events.emplace_back(from, to, f.size());
    };
  }
};

}  // namespace

TEST_CASE("in-process queues deliver frames in order") {
  InProcNetwork net(2);
  REQUIRE(net.ranks() == 3);

  Endpoint& server = net.endpoint(0);
  Endpoint& client = net.endpoint(1);
  REQUIRE(server.rank() == 0);
  REQUIRE(client.rank() == 1);

  client.send(0, make_frame({1}));
  client.send(0, make_frame({2, 2}));
  client.send(0, make_frame({3, 3, 3}));
  REQUIRE(server.recv(1, 100ms) == make_frame({1}));
  REQUIRE(server.recv(1, 100ms) == make_frame({2, 2}));
  REQUIRE(server.recv(1, 100ms) == make_frame({3, 3, 3}));
}

TEST_CASE("in-process queues are pairwise isolated") {
  InProcNetwork net(2);
  net.endpoint(1).send(0, make_frame({0x11}));
  net.endpoint(2).send(0, make_frame({0x22}));

  // Receiving from one peer never surfaces the other's frame.
  REQUIRE(net.endpoint(0).recv(2, 100ms) == make_frame({0x22}));
  REQUIRE(net.endpoint(0).recv(1, 100ms) == make_frame({0x11}));
  REQUIRE_THROWS_AS(net.endpoint(0).recv(1, 10ms), Timeout);
}

TEST_CASE("in-process receive blocks until a frame arrives") {
  InProcNetwork net(1);
  auto fut = std::async(std::launch::async, [&] { return net.endpoint(0).recv(1, 2000ms); });
  std::this_thread::sleep_for(30ms);
  net.endpoint(1).send(0, make_frame({9, 9}));
  REQUIRE(fut.get() == make_frame({9, 9}));
}

TEST_CASE("in-process timeout and shutdown are distinct failures") {
  InProcNetwork net(1);
  REQUIRE_THROWS_AS(net.endpoint(0).recv(1, 20ms), Timeout);

  auto blocked =
      std::async(std::launch::async, [&] { return net.endpoint(0).recv(1, 10000ms); });
  std::this_thread::sleep_for(30ms);
  net.shutdown();
  REQUIRE_THROWS_AS(blocked.get(), TransportClosed);
  REQUIRE_THROWS_AS(net.endpoint(1).send(0, make_frame({1})), TransportClosed);
}

TEST_CASE("in-process observer sees every frame") {
  InProcNetwork net(2);
  Tap tap;
  net.set_observer(tap.observer());

  net.endpoint(0).send(1, make_frame({1, 2, 3}));
  net.endpoint(0).send(2, make_frame({4}));
  net.endpoint(2).send(0, make_frame({5, 6}));
  net.endpoint(0).recv(2, 100ms);

  std::lock_guard<std::mutex> lock(tap.mu);
  REQUIRE(tap.events.size() == 3);
  REQUIRE(tap.events[0] == std::make_tuple(0, 1, size_t{3}));
  REQUIRE(tap.events[1] == std::make_tuple(0, 2, size_t{1}));
  REQUIRE(tap.events[2] == std::make_tuple(2, 0, size_t{2}));
}

TEST_CASE("loopback sockets carry frames both ways") {
  SocketNetwork net(2, 5s);
  const uint16_t port = net.port();
  REQUIRE(port != 0);

  auto c1 = std::async(std::launch::async,
                       [&] { return SocketNetwork::connect_client(1, port); });
  auto c2 = std::async(std::launch::async,
                       [&] { return SocketNetwork::connect_client(2, port); });
  auto server = net.server_endpoint();
  auto ep1 = c1.get();
  auto ep2 = c2.get();

  server->send(1, make_frame({10}));
  server->send(2, make_frame({20, 20}));
  REQUIRE(ep1->recv(0, 1000ms) == make_frame({10}));
  REQUIRE(ep2->recv(0, 1000ms) == make_frame({20, 20}));

  ep1->send(0, make_frame({11, 11}));
  ep2->send(0, make_frame({22}));
  REQUIRE(server->recv(1, 1000ms) == make_frame({11, 11}));
  REQUIRE(server->recv(2, 1000ms) == make_frame({22}));

  REQUIRE_THROWS_AS(ep1->send(1, make_frame({1})), TransportClosed);
  REQUIRE_THROWS_AS(ep1->recv(2, 10ms), TransportClosed);
}

TEST_CASE("loopback sockets preserve large frames and order") {
  SocketNetwork net(1, 5s);
  auto c1 = std::async(std::launch::async,
                       [&] { return SocketNetwork::connect_client(1, net.port()); });
  auto server = net.server_endpoint();
  auto client = c1.get();

  Frame big(1 << 20);
  for (size_t i = 0; i < big.size(); ++i) big[i] = static_cast<uint8_t>(i * 2654435761u);
  Frame empty;

  auto pushed = std::async(std::launch::async, [&] {
    client->send(0, big);
    client->send(0, empty);
    client->send(0, make_frame({0xab}));
  });
  REQUIRE(server->recv(1, 5000ms) == big);
  REQUIRE(server->recv(1, 1000ms) == empty);
  REQUIRE(server->recv(1, 1000ms) == make_frame({0xab}));
  pushed.get();
}

TEST_CASE("socket receive times out and detects disconnects") {
  SocketNetwork net(1, 5s);
  auto c1 = std::async(std::launch::async,
                       [&] { return SocketNetwork::connect_client(1, net.port()); });
  auto server = net.server_endpoint();
  auto client = c1.get();

  REQUIRE_THROWS_AS(server->recv(1, 30ms), Timeout);

  client.reset();  // peer hangs up
  REQUIRE_THROWS_AS(server->recv(1, 1000ms), TransportClosed);
}

TEST_CASE("socket server rejects an invalid hello") {
  SocketNetwork net(1, 2s);
  auto bogus = std::async(std::launch::async, [&] {
    try {
      auto ep = SocketNetwork::connect_client(7, net.port());  // rank out of range
      ep->recv(0, 500ms);
    } catch (const Error&) {
    }
  });
  REQUIRE_THROWS_AS(net.server_endpoint(), MalformedPayload);
  bogus.get();
}

TEST_CASE("socket observer taps server-side traffic") {
  SocketNetwork net(1, 5s);
  Tap tap;
  net.set_observer(tap.observer());
  auto c1 = std::async(std::launch::async,
                       [&] { return SocketNetwork::connect_client(1, net.port()); });
  auto server = net.server_endpoint();
  auto client = c1.get();

  server->send(1, make_frame({1, 2}));
  REQUIRE(client->recv(0, 1000ms) == make_frame({1, 2}));
  client->send(0, make_frame({3, 4, 5}));
  REQUIRE(server->recv(1, 1000ms) == make_frame({3, 4, 5}));

  std::lock_guard<std::mutex> lock(tap.mu);
  REQUIRE(tap.events.size() == 2);
  REQUIRE(tap.events[0] == std::make_tuple(0, 1, size_t{2}));
  REQUIRE(tap.events[1] == std::make_tuple(1, 0, size_t{3}));
}
