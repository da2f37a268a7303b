#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace semcom {

/// In-memory image dataset. Pixels are stored as uint8 and delivered as float [0, 1],
/// channels first. Read-only after construction, so it can be shared between readers.
class Dataset {
public:
    Dataset() = default;

    /// `images` is (N, c, h, w) uint8; `labels` is (N) int64 or undefined.
    Dataset(std::string name, std::string split, torch::Tensor images, torch::Tensor labels = {});

    /// Variable-shape datasets (Kodak mixes landscape and portrait images).
    Dataset(std::string name, std::string split, std::vector<torch::Tensor> images);

    const std::string& name() const noexcept { return name_; }
    const std::string& split() const noexcept { return split_; }
    int64_t size() const noexcept;
    bool has_labels() const noexcept { return labels_.defined(); }
    bool uniform_shape() const noexcept { return stacked_.defined(); }

    /// Image i as float (c, h, w) in [0, 1].
    torch::Tensor image(int64_t index) const;
    int64_t label(int64_t index) const;

    /// Float (B, c, h, w) batch; requires a uniform-shape dataset.
    torch::Tensor images(std::span<const int64_t> indices) const;
    torch::Tensor labels(std::span<const int64_t> indices) const;
    torch::Tensor all_labels() const { return labels_; }

    /// Shape (c, h, w) of a uniform dataset.
    std::vector<int64_t> image_shape() const;

    /// First `count` items (or all when count <= 0 or >= size()).
    Dataset head(int64_t count) const;

    /// Deterministic permutation of [0, size()) for the given seed and epoch.
    std::vector<int64_t> epoch_order(uint64_t seed, int64_t epoch) const;

private:
    std::string name_;
    std::string split_;
    torch::Tensor stacked_;
    std::vector<torch::Tensor> items_;
    torch::Tensor labels_;
};

/// Resolves the dataset root: an explicit value wins, then $DATA_ROOT, then "./data".
std::string resolve_data_root(const std::string& configured);

/// Loads cifar10 (train/test), stl10 (train/test) or kodak (all) from the standard public
/// distributions under `root`:
///   cifar10: <root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
///   stl10:   <root>/stl10_binary/{train,test}_{X,y}.bin
///   kodak:   <root>/kodak/kodim01.png .. kodim24.png
/// "synthetic" builds a small procedurally generated labelled set (see synthetic_dataset).
/// Throws MissingPrerequisiteError describing the expected layout when files are missing and
/// LoadError when they are malformed.
Dataset load_dataset(const std::string& name, const std::string& split, const std::string& root);

/// Class-conditional 32x32 RGB images: each class is a distinct oriented sinusoid and
/// colour, with per-image phase, amplitude and pixel noise. Useful for tests and smoke runs
/// when the public datasets are not available.
Dataset synthetic_dataset(int64_t count, uint64_t seed, int64_t num_classes = 10,
                          int64_t height = 32, int64_t width = 32);

/// True when every file the named dataset needs exists under root.
bool dataset_available(const std::string& name, const std::string& root);

// --- images -------------------------------------------------------------------------------

/// Reads an 8-bit PNG (gray, RGB or RGBA; alpha dropped) into a uint8 (c, h, w) tensor.
torch::Tensor read_png(const std::string& path);

/// Writes a float [0, 1] (c, h, w) tensor as an 8-bit PNG.
void write_png(const std::string& path, const torch::Tensor& image);

// --- checkpoints --------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointFormatVersion = 1;

/// Named tensors plus JSON metadata. Files carry a format-version header and a trailing
/// SHA-256 over all preceding bytes; the hex digest is the checkpoint's content hash.
struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, torch::Tensor> tensors;
    std::string content_hash;  // filled by save_checkpoint / load_checkpoint

    /// Stores every parameter and buffer of `module` under "<prefix>.<name>".
    void put_module(const std::string& prefix, const torch::nn::Module& module);

    /// Copies stored values into `module`. Throws IncompatibleError on a missing entry or a
    /// shape mismatch.
    void get_module(const std::string& prefix, torch::nn::Module& module) const;

    bool has_module(const std::string& prefix) const;

    /// Stores raw bytes as a uint8 tensor.
    void put_bytes(const std::string& name, const std::string& bytes);
    std::string get_bytes(const std::string& name) const;
};

/// Writes atomically (temp file + rename) and returns the content hash.
std::string save_checkpoint(Checkpoint& checkpoint, const std::string& path);

/// Throws LoadError for unreadable or malformed files and IntegrityError on hash mismatch
/// or truncation.
Checkpoint load_checkpoint(const std::string& path);

/// Follows metadata["parent_path"] links, returning content hashes from `path` back to the
/// root. Throws IntegrityError when a parent's hash differs from the recorded parent_hash.
std::vector<std::string> checkpoint_lineage(const std::string& path);

// --- hashing ------------------------------------------------------------------------------

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

/// Digest over the names, shapes and raw bytes of a module's parameters (and buffers when
/// requested), in registration order.
std::string module_hash(const torch::nn::Module& module, bool include_buffers = false);

}  // namespace semcom
