#include "cbllm/server.hpp"

#include <cmath>

#include "cbllm/errors.hpp"
#include "cbllm/util.hpp"
#include "httplib.h"

namespace cbllm {

using nlohmann::json;

namespace {

Server::Reply error_reply(int status, const std::string& message) { return {status, {{"error", message}}}; }

// Bad request payloads surface as this and become 400s.
struct BadRequest : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw BadRequest("request body must be a JSON object");
  return j;
}

std::uint64_t unsigned_field(const json& j, const char* key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw BadRequest(std::string("'") + key + "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

double number_field(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number() || !std::isfinite(v.get<double>())) throw BadRequest(std::string("'") + key + "' must be a finite number");
  return v.get<double>();
}

// Concept given by exact text or by index; -1 when unknown.
int resolve_concept(const ConceptSet& concepts, const json& request) {
  if (!request.contains("concept")) throw BadRequest("'concept' is required");
  const json& c = request.at("concept");
  if (c.is_string()) return concepts.find(c.get<std::string>());
  if (c.is_number_integer()) {
    const auto j = c.get<std::int64_t>();
    return j >= 0 && static_cast<std::size_t>(j) < concepts.k() ? static_cast<int>(j) : -1;
  }
  throw BadRequest("'concept' must be a concept text or index");
}

json concept_list(const ConceptSet& concepts, const std::vector<std::uint8_t>* mask) {
  json list = json::array();
  for (std::size_t j = 0; j < concepts.k(); ++j) {
    const Concept& c = concepts.concept_at(j);
    json e = {{"index", j},
              {"text", c.text},
              {"category", c.category},
              {"category_name", concepts.category_names()[static_cast<std::size_t>(c.category)]}};
    if (mask) e["unlearned"] = (*mask)[j] != 0;
    list.push_back(std::move(e));
  }
  return list;
}

void send(httplib::Response& res, const Server::Reply& reply) {
  res.status = reply.status;
  res.set_content(reply.body.dump(2) + "\n", "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    send(res, f());
  } catch (const BadRequest& e) {
    send(res, error_reply(400, e.what()));
  } catch (const UsageError& e) {
    send(res, error_reply(400, e.what()));
  } catch (const ValidationError& e) {
    send(res, error_reply(400, e.what()));
  } catch (const std::exception& e) {
    send(res, error_reply(500, e.what()));
  }
}

std::string sse_event(const char* event, const json& data) {
  return std::string("event: ") + event + "\ndata: " + data.dump() + "\n\n";
}

// Validated /generate request.
struct GenerateRequest {
  std::vector<int> prompt;
  InterventionSpec interventions;
  GenerateOptions options;
};

GenerateRequest parse_generate(const GenerativeModel& model, const json& request) {
  GenerateRequest g;
  if (request.contains("prompt")) {
    if (!request.at("prompt").is_string()) throw BadRequest("'prompt' must be a string");
    g.prompt = encode(request.at("prompt").get<std::string>(), model.vocab);
  }
  if (request.contains("interventions")) {
    const json& list = request.at("interventions");
    if (!list.is_array()) throw BadRequest("'interventions' must be an array");
    for (const json& iv : list) {
      if (!iv.is_object()) throw BadRequest("each intervention must be {neuron, value}");
      if (!iv.contains("neuron") || !iv.contains("value")) throw BadRequest("each intervention needs 'neuron' and 'value'");
      const auto neuron = unsigned_field(iv, "neuron", 0);
      if (neuron >= model.k()) {
        throw BadRequest("intervention neuron " + std::to_string(neuron) + " out of range (k = " + std::to_string(model.k()) + ")");
      }
      g.interventions.push_back({static_cast<std::size_t>(neuron), static_cast<float>(number_field(iv, "value", 0.0))});
    }
  }
  g.options.max_tokens = unsigned_field(request, "max_tokens", g.options.max_tokens);
  if (g.options.max_tokens == 0) throw BadRequest("'max_tokens' must be >= 1");
  g.options.temperature = static_cast<float>(number_field(request, "temperature", g.options.temperature));
  if (g.options.temperature < 0.0f) throw BadRequest("'temperature' must be >= 0");
  g.options.seed = unsigned_field(request, "seed", g.options.seed);
  validate_interventions(g.interventions, model.k());
  return g;
}

}  // namespace

std::string config_hash(const ModelConfig& cfg) { return hex64(fnv1a(cfg.to_json().dump())); }

Server::Server(ServerModels models) : models_(std::move(models)), http_(std::make_unique<httplib::Server>()) { routes(); }

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) return http_->bind_to_any_port(host);
  return http_->bind_to_port(host, port) ? port : -1;
}

bool Server::listen() { return http_->listen_after_bind(); }

void Server::stop() {
  if (http_ && http_->is_running()) http_->stop();
}

void Server::wait_until_ready() const { http_->wait_until_ready(); }

json Server::mask_json() const {
  json mask = json::array();
  for (std::uint8_t m : models_.classifier->mask) mask.push_back(m != 0);
  return mask;
}

Server::Reply Server::classify(const json& request) const {
  if (!models_.classifier) return error_reply(409, "no classifier loaded");
  if (!request.contains("text") || !request.at("text").is_string()) throw BadRequest("'text' must be a string");
  const std::string text = request.at("text").get<std::string>();
  if (split_words(text).empty()) throw BadRequest("'text' is empty");
  const auto r = unsigned_field(request, "r", 5);
  if (r == 0) throw BadRequest("'r' must be >= 1");
  std::shared_lock lock(mask_mutex_);
  return {200, models_.classifier->explain(text, static_cast<std::size_t>(r)).to_json()};
}

Server::Reply Server::set_mask(const json& request, bool unlearned) {
  if (!models_.classifier) return error_reply(409, "no classifier loaded");
  ClassifierModel& model = *models_.classifier;
  const int j = resolve_concept(model.concepts, request);
  if (j < 0) return error_reply(404, "unknown concept " + request.at("concept").dump());
  std::unique_lock lock(mask_mutex_);
  if (unlearned) {
    model.unlearn(static_cast<std::size_t>(j));
  } else {
    model.restore(static_cast<std::size_t>(j));
  }
  return {200, {{"concept", model.concepts.concept_at(static_cast<std::size_t>(j)).text}, {"index", j}, {"mask", mask_json()}}};
}

Server::Reply Server::save_mask() const {
  if (!models_.classifier) return error_reply(409, "no classifier loaded");
  if (models_.mask_path.empty()) return error_reply(409, "no mask path configured (serve --mask-path)");
  std::shared_lock lock(mask_mutex_);
  json mask = mask_json();
  json doc = {{"concepts", models_.classifier->concepts.to_json()}, {"mask", mask}};
  write_file(models_.mask_path, doc.dump(2) + "\n");
  return {200, {{"path", models_.mask_path}, {"mask", mask}}};
}

Server::Reply Server::concepts(const std::string& which) const {
  std::string pick = which;
  if (pick.empty()) pick = models_.classifier ? "classifier" : "generator";
  if (pick == "classifier") {
    if (!models_.classifier) return error_reply(409, "no classifier loaded");
    std::shared_lock lock(mask_mutex_);
    const auto& c = models_.classifier->concepts;
    return {200, {{"model", pick}, {"k", c.k()}, {"concepts", concept_list(c, &models_.classifier->mask)}}};
  }
  if (pick == "generator") {
    if (!models_.generator) return error_reply(409, "no generator loaded");
    const auto& c = models_.generator->concepts;
    return {200, {{"model", pick}, {"k", c.k()}, {"concepts", concept_list(c, nullptr)}}};
  }
  throw BadRequest("'model' must be classifier or generator");
}

Server::Reply Server::info() const {
  if (!models_.classifier && !models_.generator) return error_reply(409, "no model loaded");
  json body = {{"loaded", {{"classifier", models_.classifier.has_value()}, {"generator", models_.generator.has_value()}}}};
  if (models_.classifier) {
    const auto& m = *models_.classifier;
    std::shared_lock lock(mask_mutex_);
    body["classifier"] = {{"config", m.config.to_json()}, {"config_hash", config_hash(m.config)},
                          {"k", m.k()},           {"n", m.n()},
                          {"categories", m.concepts.category_names()}, {"mask", mask_json()}};
  }
  if (models_.generator) {
    const auto& m = *models_.generator;
    body["generator"] = {{"config", m.config.to_json()},
                         {"config_hash", config_hash(m.config)},
                         {"k", m.k()},
                         {"u", m.u()},
                         {"categories", m.concepts.category_names()},
                         {"adversarial", m.options.adversarial},
                         {"options", m.options.to_json()},
                         {"with_probe", m.has_probe()}};
  }
  return {200, body};
}

void Server::routes() {
  using httplib::Request;
  using httplib::Response;
  http_->Post("/classify", [this](const Request& req, Response& res) {
    guarded(res, [&] { return classify(parse_body(req.body)); });
  });
  http_->Post("/unlearn", [this](const Request& req, Response& res) {
    guarded(res, [&] { return set_mask(parse_body(req.body), true); });
  });
  http_->Post("/restore", [this](const Request& req, Response& res) {
    guarded(res, [&] { return set_mask(parse_body(req.body), false); });
  });
  http_->Post("/mask/save", [this](const Request&, Response& res) { guarded(res, [&] { return save_mask(); }); });
  http_->Get("/concepts", [this](const Request& req, Response& res) {
    guarded(res, [&] { return concepts(req.get_param_value("model")); });
  });
  http_->Get("/model/info", [this](const Request&, Response& res) { guarded(res, [&] { return info(); }); });
  http_->Get(R"(/transcripts/([0-9a-f]+))", [this](const Request& req, Response& res) {
    guarded(res, [&]() -> Reply {
      std::lock_guard lock(transcripts_mutex_);
      auto it = transcripts_.find(req.matches[1].str());
      if (it == transcripts_.end()) return error_reply(404, "unknown transcript");
      return {200, it->second};
    });
  });

  http_->Post("/generate", [this](const Request& req, Response& res) {
    if (!models_.generator) return send(res, error_reply(409, "no generator loaded"));
    GenerateRequest g;
    try {
      g = parse_generate(*models_.generator, parse_body(req.body));
    } catch (const std::exception& e) {
      return send(res, error_reply(400, e.what()));
    }
    // The stream owns its request; the sampler is seeded per request.
    res.set_chunked_content_provider("text/event-stream", [this, g](std::size_t, httplib::DataSink& sink) {
      const GenerativeModel& model = *models_.generator;
      bool open = true;
      auto write = [&](const std::string& chunk) {
        if (open) open = sink.write(chunk.data(), chunk.size());
      };
      try {
        GenerationResult result =
            generate(model, g.prompt, g.interventions, g.options, [&](std::size_t step, int token, std::span<const float> act) {
              write(sse_event("token", {{"step", step},
                                        {"token", model.vocab.token(token)},
                                        {"id", token},
                                        {"activations", std::vector<float>(act.begin(), act.end())}}));
            });
        json transcript = generation_transcript(model, result, g.options);
        const std::string id = transcript.at("id").get<std::string>();
        {
          std::lock_guard lock(transcripts_mutex_);
          transcripts_[id] = transcript;
        }
        write(sse_event("done", {{"id", id}, {"tokens", result.tokens.size()}, {"text", result.text(model.vocab)}}));
      } catch (const std::exception& e) {
        write(sse_event("error", {{"error", e.what()}}));
      }
      sink.done();
      return true;
    });
  });
}

}  // namespace cbllm
