#include "lamkit/extract.hpp"

#include <chrono>
#include <optional>
#include <thread>

#include "lamkit/errors.hpp"

namespace lamkit {

Manifest extraction_store_meta(const ExtractionConfig& config) {
  Manifest m;
  m.set("kind", "pooled_embeddings");
  m.set("config_id", config.config_id());
  m.set("vlm_id", config.vlm_id);
  m.set_int("prompt_id", config.prompt_id);
  m.set("layer", layer_name(config.layer));
  m.set("source", source_name(config.source));
  m.set("pooling", pooling_name(config.pooling));
  return m;
}

ExtractReport extract_embeddings(const TrajectoryDataset& ds, const ExtractionConfig& config,
                                 VLMClient& client, const std::filesystem::path& store_dir,
                                 const ExtractOptions& opts) {
  TaskMeta meta = opts.task_meta;
  if (meta.task.empty()) meta.task = ds.manifest.get_or("task_text", "");
  std::string prompt = render_prompt(config.prompt_id, meta);
  bool generate = config.source == TokenSource::generated_tokens;
  int size = static_cast<int>(ds.frame_size());

  std::optional<EmbeddingStore> store;
  if (EmbeddingStore::exists(store_dir)) {
    store = EmbeddingStore::open(store_dir);
    if (store->manifest().get_or("config_id", "") != config.config_id())
      throw ConfigError("store at " + store_dir.string() +
                        " was extracted under a different configuration");
  }

  auto make_request = [&](int64_t n, int64_t t) {
    VlmRequest req;
    req.tag = "t" + std::to_string(n) + "_f" + std::to_string(t);
    req.image = ds.frame(n, t);
    req.height = size;
    req.width = size;
    req.prompt = prompt;
    req.generate = generate;
    req.max_new_tokens = opts.max_new_tokens;
    return req;
  };

  ExtractReport report;
  std::vector<std::pair<int64_t, int64_t>> pending;
  for (int64_t n = 0; n < ds.num_trajectories(); ++n)
    for (int64_t t = 0; t <= ds.horizon(); ++t) {
      if (store && store->has(static_cast<uint32_t>(n), static_cast<uint32_t>(t))) {
        ++report.frames_skipped;
        continue;
      }
      pending.emplace_back(n, t);
    }

  for (auto [n, t] : pending) client.stage(make_request(n, t));
  client.flush_staged();

  int unflushed = 0;
  for (auto [n, t] : pending) {
    VlmRequest req = make_request(n, t);
    VlmResponse resp;
    bool done = false;
    for (int attempt = 1; attempt <= opts.retries && !done; ++attempt) {
      try {
        resp = client.request(req);
        done = true;
      } catch (const Error& e) {
        if (attempt == opts.retries) {
          if (store) store->flush();
          throw Error("extraction aborted at trajectory " + std::to_string(n) + " frame " +
                      std::to_string(t) + " after " + std::to_string(opts.retries) +
                      " attempts: " + e.what());
        }
        std::this_thread::sleep_for(
            std::chrono::milliseconds(opts.backoff_ms << (attempt - 1)));
      }
    }

    std::vector<float> vec = pool(resp.at(config.layer), config.source, config.pooling);
    if (!store)
      store = EmbeddingStore::create(store_dir, extraction_store_meta(config),
                                     static_cast<int64_t>(vec.size()));
    else if (store->dim() != static_cast<int64_t>(vec.size()))
      throw CorruptionError("pooled dim changed mid-extraction: store has " +
                            std::to_string(store->dim()) + ", response gave " +
                            std::to_string(vec.size()));
    store->append(static_cast<uint32_t>(n), static_cast<uint32_t>(t), vec);
    ++report.frames_written;
    if (++unflushed >= opts.batch_size) {
      store->flush();
      unflushed = 0;
    }
  }
  if (store) store->flush();
  return report;
}

}  // namespace lamkit
