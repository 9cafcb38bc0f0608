#include "lamkit/vlm.hpp"

#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "lamkit/errors.hpp"
#include "lamkit/rng.hpp"
#include "lamkit/store.hpp"
#include "nlohmann/json.hpp"

namespace lamkit {

namespace {

const std::string kPromptTemplates[] = {
    "The robot task is to [task]. Briefly, what is the next logical action for the robotic "
    "arm?",
    "Do not describe background features. Focus on the robot arm and the [task-obj].",
    "Do you see a robot gripper?",
    "Is there [task-obj] and a robot in the image?",
    "Robot [doing task] on a table.",
    "Point to the robotic arm gripper.",
    "Point to where I should grasp to accomplish the following task - [task].",
    "Segment a robot.",
};

void substitute_all(std::string& text, const std::string& placeholder, const std::string& value) {
  size_t pos;
  while ((pos = text.find(placeholder)) != std::string::npos) {
    if (value.empty())
      throw ConfigError("prompt placeholder " + placeholder + " has no value in task metadata");
    text.replace(pos, placeholder.size(), value);
  }
}

}  // namespace

const char* layer_name(Layer l) { return l == Layer::last ? "last" : "next_to_last"; }

const char* source_name(TokenSource s) {
  return s == TokenSource::prompt_tokens ? "prompt" : "generated";
}

const char* pooling_name(TokenPooling p) {
  return p == TokenPooling::mean ? "mean" : "last_non_padding";
}

Layer parse_layer(const std::string& s) {
  if (s == "last") return Layer::last;
  if (s == "next_to_last") return Layer::next_to_last;
  throw ConfigError("unknown layer '" + s + "' (expected last or next_to_last)");
}

TokenSource parse_source(const std::string& s) {
  if (s == "prompt") return TokenSource::prompt_tokens;
  if (s == "generated") return TokenSource::generated_tokens;
  throw ConfigError("unknown token source '" + s + "' (expected prompt or generated)");
}

TokenPooling parse_pooling(const std::string& s) {
  if (s == "mean") return TokenPooling::mean;
  if (s == "last_non_padding") return TokenPooling::last_non_padding;
  throw ConfigError("unknown pooling '" + s + "' (expected mean or last_non_padding)");
}

int num_prompt_templates() { return 8; }

const std::string& prompt_template(int id) {
  if (id < 1 || id > num_prompt_templates())
    throw ConfigError("prompt id " + std::to_string(id) + " out of range 1.." +
                      std::to_string(num_prompt_templates()));
  return kPromptTemplates[id - 1];
}

std::string render_prompt(int id, const TaskMeta& task_meta) {
  std::string text = prompt_template(id);
  substitute_all(text, "[task]", task_meta.task);
  substitute_all(text, "[task-obj]", task_meta.task_obj);
  substitute_all(text, "[doing task]", task_meta.doing_task);
  return text;
}

std::string ExtractionConfig::cell_name() const {
  std::string s = "p" + std::to_string(prompt_id);
  s += "_";
  s += layer_name(layer);
  s += "_";
  s += source_name(source);
  s += "_";
  s += pooling_name(pooling);
  return s;
}

std::string ExtractionConfig::config_id() const {
  std::string canon = vlm_id + "|" + cell_name();
  uint64_t h = fnv1a64(canon);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ExtractionConfig> enumerate_extraction_configs(const std::string& vlm_id) {
  std::vector<ExtractionConfig> out;
  out.reserve(64);
  for (int p = 1; p <= num_prompt_templates(); ++p)
    for (Layer l : {Layer::last, Layer::next_to_last})
      for (TokenSource s : {TokenSource::prompt_tokens, TokenSource::generated_tokens})
        for (TokenPooling g : {TokenPooling::mean, TokenPooling::last_non_padding}) {
          ExtractionConfig c;
          c.vlm_id = vlm_id;
          c.prompt_id = p;
          c.layer = l;
          c.source = s;
          c.pooling = g;
          out.push_back(c);
        }
  return out;
}

std::vector<float> pool(const TokenEmbeddings& tokens, TokenSource source, TokenPooling pooling) {
  uint8_t want_role = source == TokenSource::generated_tokens ? 1 : 0;
  std::vector<int64_t> selected;
  for (int64_t i = 0; i < tokens.n_tokens(); ++i)
    if (tokens.roles[i] == want_role && tokens.valid[i]) selected.push_back(i);
  if (selected.empty())
    throw ConfigError(std::string("empty token selection: response has no ") +
                      source_name(source) + " tokens");

  std::vector<float> out(static_cast<size_t>(tokens.dim));
  if (pooling == TokenPooling::last_non_padding) {
    auto r = tokens.row(selected.back());
    std::copy(r.begin(), r.end(), out.begin());
    return out;
  }
  std::vector<double> acc(static_cast<size_t>(tokens.dim), 0.0);
  for (int64_t i : selected) {
    auto r = tokens.row(i);
    for (int64_t d = 0; d < tokens.dim; ++d) acc[d] += r[d];
  }
  for (int64_t d = 0; d < tokens.dim; ++d)
    out[d] = static_cast<float>(acc[d] / static_cast<double>(selected.size()));
  return out;
}

void write_ppm(const std::filesystem::path& path, int height, int width, const uint8_t* rgb) {
  std::ostringstream head;
  head << "P6\n" << width << " " << height << "\n255\n";
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    std::string h = head.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(rgb),
              static_cast<std::streamsize>(3 * height * width));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string());
}

namespace {

class MockVlmClient final : public VLMClient {
 public:
  explicit MockVlmClient(const MockVlmOptions& opts) : opts_(opts) {}

  VlmResponse request(const VlmRequest& req) override {
    if (!req.tag.empty() && req.tag == opts_.fail_tag)
      throw IoError("mock client configured to fail for tag " + req.tag);
    if (served_ < opts_.fail_transient) {
      ++served_;
      throw IoError("mock client transient failure");
    }
    ++served_;

    uint64_t img_hash =
        fnv1a64(req.image, static_cast<size_t>(3) * req.height * req.width);
    uint64_t prompt_hash = fnv1a64(req.prompt);
    VlmResponse resp;
    resp.last = layer_tokens(img_hash, prompt_hash, 0, req.generate);
    resp.next_to_last = layer_tokens(img_hash, prompt_hash, 1, req.generate);
    return resp;
  }

 private:
  TokenEmbeddings layer_tokens(uint64_t img_hash, uint64_t prompt_hash, uint64_t layer,
                               bool generate) {
    int n_gen = generate ? opts_.n_generated_tokens : 0;
    int n_pad = generate ? opts_.n_padding : 0;
    int total = opts_.n_prompt_tokens + n_gen + n_pad;

    TokenEmbeddings t;
    t.dim = opts_.dim;
    t.data.resize(static_cast<size_t>(total) * opts_.dim);
    t.roles.resize(total);
    t.valid.resize(total);
    for (int i = 0; i < total; ++i) {
      bool pad = i >= opts_.n_prompt_tokens + n_gen;
      t.roles[i] = i >= opts_.n_prompt_tokens ? 1 : 0;
      t.valid[i] = pad ? 0 : 1;
      float* row = t.data.data() + static_cast<size_t>(i) * opts_.dim;
      if (pad) {
        std::fill(row, row + opts_.dim, 1e6f);
        continue;
      }
      Rng rng({opts_.seed, img_hash, prompt_hash, layer, static_cast<uint64_t>(t.roles[i]),
               static_cast<uint64_t>(i)});
      for (int d = 0; d < opts_.dim; ++d)
        row[d] = opts_.constant ? *opts_.constant : rng.uniform(-1.0f, 1.0f);
    }
    return t;
  }

  MockVlmOptions opts_;
  int served_ = 0;
};

// Shard path helper for the batch transport: one vector store per
// (layer, role), rows keyed by (request index, token index).
std::filesystem::path shard_dir(const std::filesystem::path& root, Layer l, bool generated) {
  return root / "responses" / layer_name(l) / (generated ? "generated" : "prompt");
}

class BatchFileVlmClient final : public VLMClient {
 public:
  BatchFileVlmClient(std::filesystem::path dir, int poll_timeout_ms)
      : dir_(std::move(dir)), poll_timeout_ms_(poll_timeout_ms) {
    std::filesystem::create_directories(dir_ / "images");
    load_request_index();
  }

  void stage(const VlmRequest& req) override {
    if (req.tag.empty()) throw ConfigError("batch client requires a request tag");
    if (request_index_.contains(req.tag)) return;
    int index = static_cast<int>(request_index_.size());
    request_index_[req.tag] = index;

    std::string image_rel = "images/" + req.tag + ".ppm";
    write_ppm(dir_ / image_rel, req.height, req.width, req.image);

    nlohmann::ordered_json j;
    j["index"] = index;
    j["tag"] = req.tag;
    j["image"] = image_rel;
    j["prompt"] = req.prompt;
    j["generate"] = req.generate;
    j["max_new_tokens"] = req.max_new_tokens;
    j["layers"] = {layer_name(Layer::last), layer_name(Layer::next_to_last)};
    std::ofstream out(dir_ / "requests.jsonl", std::ios::app);
    if (!out) throw IoError("cannot append to requests.jsonl in " + dir_.string());
    out << j.dump() << "\n";
    staged_ = true;
  }

  void flush_staged() override {
    if (!staged_) return;
    atomic_write_text(dir_ / "REQUESTS_DONE", std::to_string(request_index_.size()) + "\n");
    staged_ = false;
  }

  VlmResponse request(const VlmRequest& req) override {
    auto it = request_index_.find(req.tag);
    if (it == request_index_.end())
      throw LookupError("request tag was never staged: " + req.tag);
    ensure_responses();
    uint32_t index = static_cast<uint32_t>(it->second);

    VlmResponse resp;
    resp.last = assemble(Layer::last, index, req.generate);
    resp.next_to_last = assemble(Layer::next_to_last, index, req.generate);
    return resp;
  }

 private:
  void load_request_index() {
    std::ifstream in(dir_ / "requests.jsonl");
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded())
        throw ParseError("malformed request line in " + (dir_ / "requests.jsonl").string());
      request_index_[j.at("tag").get<std::string>()] = j.at("index").get<int>();
    }
  }

  void ensure_responses() {
    if (responses_loaded_) return;
    auto marker = dir_ / "RESPONSES_DONE";
    auto deadline =
        std::chrono::steady_clock::now() + std::chrono::milliseconds(poll_timeout_ms_);
    while (!std::filesystem::exists(marker)) {
      if (std::chrono::steady_clock::now() >= deadline)
        throw IoError("batch responses not ready in " + dir_.string());
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    for (Layer l : {Layer::last, Layer::next_to_last})
      for (bool gen : {false, true}) {
        auto d = shard_dir(dir_, l, gen);
        if (EmbeddingStore::exists(d))
          shards_[shard_slot(l, gen)] =
              std::make_unique<EmbeddingStore>(EmbeddingStore::open(d));
      }
    responses_loaded_ = true;
  }

  static int shard_slot(Layer l, bool gen) {
    return (l == Layer::last ? 0 : 2) + (gen ? 1 : 0);
  }

  TokenEmbeddings assemble(Layer l, uint32_t index, bool want_generated) {
    TokenEmbeddings t;
    t.dim = 0;
    auto take = [&](bool gen) {
      const auto& shard = shards_[shard_slot(l, gen)];
      if (!shard) {
        if (!gen)
          throw LookupError(std::string("missing ") + layer_name(l) +
                            "/prompt response shard in " + dir_.string());
        return;
      }
      if (!shard->has(index, 0) && gen) return;
      for (int64_t r : shard->rows_for(index, 0)) {
        auto row = shard->row(r);
        if (t.dim == 0) t.dim = shard->dim();
        if (t.dim != shard->dim())
          throw CorruptionError("response shards disagree on dim in " + dir_.string());
        t.data.insert(t.data.end(), row.begin(), row.end());
        t.roles.push_back(gen ? 1 : 0);
        t.valid.push_back(1);
      }
    };
    take(false);
    if (want_generated) take(true);
    return t;
  }

  std::filesystem::path dir_;
  int poll_timeout_ms_;
  std::unordered_map<std::string, int> request_index_;
  std::unique_ptr<EmbeddingStore> shards_[4];
  bool responses_loaded_ = false;
  bool staged_ = false;
};

}  // namespace

std::unique_ptr<VLMClient> make_mock_vlm_client(const MockVlmOptions& opts) {
  return std::make_unique<MockVlmClient>(opts);
}

std::unique_ptr<VLMClient> make_batch_vlm_client(const std::filesystem::path& dir,
                                                 int poll_timeout_ms) {
  return std::make_unique<BatchFileVlmClient>(dir, poll_timeout_ms);
}

std::unique_ptr<VLMClient> make_vlm_client(const std::string& endpoint) {
  if (endpoint == "mock") return make_mock_vlm_client({});
  if (endpoint.rfind("mock:", 0) == 0) {
    MockVlmOptions opts;
    try {
      opts.dim = std::stoi(endpoint.substr(5));
    } catch (const std::exception&) {
      throw ConfigError("bad mock endpoint '" + endpoint + "', expected mock:<dim>");
    }
    if (opts.dim <= 0) throw ConfigError("mock dim must be positive");
    return make_mock_vlm_client(opts);
  }
  if (endpoint.rfind("batch:", 0) == 0) {
    std::string dir = endpoint.substr(6);
    if (dir.empty()) throw ConfigError("batch endpoint needs a directory: batch:<dir>");
    return make_batch_vlm_client(dir);
  }
  throw ConfigError("unknown VLM client endpoint '" + endpoint +
                    "' (expected mock, mock:<dim> or batch:<dir>)");
}

}  // namespace lamkit
