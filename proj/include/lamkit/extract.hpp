#pragma once

#include <filesystem>

#include "lamkit/dataset.hpp"
#include "lamkit/store.hpp"
#include "lamkit/vlm.hpp"

namespace lamkit {

struct ExtractOptions {
  int batch_size = 16;      // flush granularity; progress survives past each batch
  int max_new_tokens = 32;
  int retries = 3;
  int backoff_ms = 100;     // doubles per retry
  TaskMeta task_meta;       // defaults to the dataset task when fields are empty
};

struct ExtractReport {
  int64_t frames_written = 0;
  int64_t frames_skipped = 0;  // already present before this run
};

// Runs one extraction cell over every frame of the dataset, frames in
// (trajectory, frame) order, writing pooled vectors into a store at
// store_dir. Safe to re-run: present frames are skipped and the resumed
// store is byte-identical to a single uninterrupted run. On persistent
// client failure the flushed prefix is kept and the error is rethrown.
ExtractReport extract_embeddings(const TrajectoryDataset& ds, const ExtractionConfig& config,
                                 VLMClient& client, const std::filesystem::path& store_dir,
                                 const ExtractOptions& opts = {});

// Store metadata written for a cell; also what train-time loading validates.
Manifest extraction_store_meta(const ExtractionConfig& config);

}  // namespace lamkit
