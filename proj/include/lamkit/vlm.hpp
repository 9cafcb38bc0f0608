#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lamkit {

// Promptable representation extraction. A frozen vision-language model is
// treated as a feature extractor: we send it a frame plus a prompt and keep
// per-token hidden states from the two final layers. A single extraction
// cell fixes the prompt, the layer, which tokens to read, and how to reduce
// them to one vector.

enum class Layer { last, next_to_last };
enum class TokenSource { prompt_tokens, generated_tokens };
enum class TokenPooling { mean, last_non_padding };

const char* layer_name(Layer l);
const char* source_name(TokenSource s);
const char* pooling_name(TokenPooling p);
Layer parse_layer(const std::string& s);
TokenSource parse_source(const std::string& s);
TokenPooling parse_pooling(const std::string& s);

// Values for the bracketed placeholders in prompt templates.
struct TaskMeta {
  std::string task;        // [task], imperative clause
  std::string task_obj;    // [task-obj], the manipulated object
  std::string doing_task;  // [doing task], progressive clause
};

int num_prompt_templates();                 // 8
const std::string& prompt_template(int id); // 1-based; ConfigError if out of range

// Substitutes placeholders. Throws ConfigError naming the placeholder when
// the template needs a field that task_meta leaves empty.
std::string render_prompt(int id, const TaskMeta& task_meta);

struct ExtractionConfig {
  std::string vlm_id;
  int prompt_id = 1;
  Layer layer = Layer::last;
  TokenSource source = TokenSource::prompt_tokens;
  TokenPooling pooling = TokenPooling::mean;

  // Canonical cell description and its stable 64-bit hash (hex). The hash
  // only depends on the field values, never on process state.
  std::string cell_name() const;
  std::string config_id() const;
};

// The full grid for one VLM: 8 prompts x 2 layers x 2 sources x 2 poolings,
// prompt-major. Element 0 is (prompt 1, last, prompt_tokens, mean).
std::vector<ExtractionConfig> enumerate_extraction_configs(const std::string& vlm_id);

// Token matrix for one layer of one response. Padding rows carry valid=0
// and are excluded from pooling.
struct TokenEmbeddings {
  int64_t dim = 0;
  std::vector<float> data;       // n_tokens x dim, row-major
  std::vector<uint8_t> roles;    // 0 = prompt token, 1 = generated token
  std::vector<uint8_t> valid;    // 0 = padding

  int64_t n_tokens() const { return static_cast<int64_t>(roles.size()); }
  std::span<const float> row(int64_t i) const {
    return {data.data() + i * dim, static_cast<size_t>(dim)};
  }
};

// Selects tokens by source role (padding excluded) and reduces them to a
// single vector. Throws ConfigError when the selection is empty.
std::vector<float> pool(const TokenEmbeddings& tokens, TokenSource source, TokenPooling pooling);

struct VlmRequest {
  std::string tag;          // caller-chosen key, stable per frame
  const uint8_t* image = nullptr;
  int height = 0, width = 0;
  std::string prompt;
  bool generate = false;
  int max_new_tokens = 0;
};

struct VlmResponse {
  TokenEmbeddings last;
  TokenEmbeddings next_to_last;

  const TokenEmbeddings& at(Layer l) const {
    return l == Layer::last ? last : next_to_last;
  }
};

// One request, one response; both final layers come back together.
// stage()/flush_staged() let batch transports see the whole workload before
// the first blocking request.
class VLMClient {
 public:
  virtual ~VLMClient() = default;
  virtual void stage(const VlmRequest&) {}
  virtual void flush_staged() {}
  virtual VlmResponse request(const VlmRequest& req) = 0;
};

// Deterministic stand-in model: token embeddings are a pure function of
// (seed, image bytes, prompt, layer, role, token index). Appends a few
// padding rows with sentinel values so pooling bugs show up loudly.
struct MockVlmOptions {
  int dim = 32;
  int n_prompt_tokens = 5;
  int n_generated_tokens = 4;
  int n_padding = 2;
  std::optional<float> constant;  // fixed value for every entry
  int fail_transient = 0;         // first N request() calls throw, then recover
  std::string fail_tag;           // request() always throws for this tag
  uint64_t seed = 0;
};

std::unique_ptr<VLMClient> make_mock_vlm_client(const MockVlmOptions& opts);

// File-based batch transport rooted at a directory. stage() records request
// lines in requests.jsonl and dumps frames as PPM; flush_staged() writes the
// REQUESTS_DONE marker. request() serves token matrices from response shards
// once RESPONSES_DONE appears, polling up to poll_timeout_ms first.
std::unique_ptr<VLMClient> make_batch_vlm_client(const std::filesystem::path& dir,
                                                 int poll_timeout_ms = 1000);

// Endpoint syntax: "mock", "mock:<dim>", "batch:<dir>".
std::unique_ptr<VLMClient> make_vlm_client(const std::string& endpoint);

void write_ppm(const std::filesystem::path& path, int height, int width, const uint8_t* rgb);

}  // namespace lamkit
