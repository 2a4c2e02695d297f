#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>

#include "cbllm/cbm_classifier.hpp"
#include "cbllm/cbm_generator.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace cbllm {

// What a serving process holds. Models are loaded read-only; the only mutable
// state is the classifier's unlearn mask (and the transcript log).
struct ServerModels {
  std::optional<ClassifierModel> classifier;
  std::optional<GenerativeModel> generator;
  std::string mask_path;  // where POST /mask/save writes; empty disables it
};

// HTTP+JSON front end (cpp-httplib). Endpoints:
//
//   POST /classify  {text, r=5}             -> Explanation::to_json()
//   POST /unlearn   {concept}               -> {concept, index, mask}
//   POST /restore   {concept}               -> {concept, index, mask}
//   POST /mask/save {}                      -> {path, mask}
//   POST /generate  {prompt, interventions, max_tokens, temperature, seed}
//                   -> text/event-stream: "token" events {step, token, id,
//                      activations}, then "done" {id, transcript} or "error"
//   GET  /transcripts/<id>                  -> transcript of a finished stream
//   GET  /concepts?model=classifier|generator
//   GET  /model/info
//
// `concept` is either the concept's exact text or its integer index. Errors
// are {"error": message} with 400 (bad request), 404 (unknown concept or
// transcript), 409 (model not loaded) or 500.
//
// Classification and generation take a shared lock; mask edits take it
// exclusively, so every response sees a whole mask. The server never trains.
class Server {
 public:
  explicit Server(ServerModels models);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds; port 0 picks a free port. Returns the bound port (or -1).
  int bind(const std::string& host, int port);
  // Blocks serving requests until stop().
  bool listen();
  void stop();
  void wait_until_ready() const;

  // Request handlers, also callable without a socket (status, JSON body).
  struct Reply {
    int status = 200;
    nlohmann::json body;
  };
  Reply classify(const nlohmann::json& request) const;
  Reply set_mask(const nlohmann::json& request, bool unlearned);
  Reply save_mask() const;
  Reply concepts(const std::string& which) const;
  Reply info() const;

 private:
  void routes();
  nlohmann::json mask_json() const;  // caller holds the lock

  ServerModels models_;
  std::unique_ptr<httplib::Server> http_;
  mutable std::shared_mutex mask_mutex_;
  mutable std::mutex transcripts_mutex_;
  std::map<std::string, nlohmann::json> transcripts_;
};

// Stable hex digest of a model config, reported by /model/info.
std::string config_hash(const ModelConfig& cfg);

}  // namespace cbllm
