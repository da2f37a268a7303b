#include "semcom/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>
#include <openssl/evp.h>
#include <png.h>

#include "semcom/errors.hpp"

namespace fs = std::filesystem;

namespace semcom {

// --- Dataset ------------------------------------------------------------------------------

Dataset::Dataset(std::string name, std::string split, torch::Tensor images, torch::Tensor labels)
    : name_(std::move(name)), split_(std::move(split)), labels_(std::move(labels)) {
    if (images.dim() != 4 || images.scalar_type() != torch::kByte) {
        throw ShapeError("dataset images must be (N, c, h, w) uint8, got " +
                         c10::str(images.sizes()));
    }
    if (labels_.defined() && (labels_.dim() != 1 || labels_.size(0) != images.size(0))) {
        throw ShapeError("dataset labels must be (N)");
    }
    stacked_ = images.contiguous();
    if (labels_.defined()) {
        labels_ = labels_.to(torch::kLong).contiguous();
    }
}

Dataset::Dataset(std::string name, std::string split, std::vector<torch::Tensor> images)
    : name_(std::move(name)), split_(std::move(split)), items_(std::move(images)) {
    for (const auto& item : items_) {
        if (item.dim() != 3 || item.scalar_type() != torch::kByte) {
            throw ShapeError("dataset images must be (c, h, w) uint8");
        }
    }
}

int64_t Dataset::size() const noexcept {
    return stacked_.defined() ? stacked_.size(0) : static_cast<int64_t>(items_.size());
}

torch::Tensor Dataset::image(int64_t index) const {
    if (index < 0 || index >= size()) {
        throw std::out_of_range("dataset index " + std::to_string(index) + " out of range");
    }
    const auto& raw = stacked_.defined() ? stacked_[index] : items_[static_cast<size_t>(index)];
    return raw.to(torch::kFloat).div_(255.0);
}

int64_t Dataset::label(int64_t index) const {
    if (!labels_.defined()) {
        throw LoadError("dataset '" + name_ + "' has no labels");
    }
    return labels_[index].item<int64_t>();
}

namespace {

torch::Tensor index_tensor(std::span<const int64_t> indices) {
    return torch::tensor(std::vector<int64_t>(indices.begin(), indices.end()), torch::kLong);
}

}  // namespace

torch::Tensor Dataset::images(std::span<const int64_t> indices) const {
    if (!stacked_.defined()) {
        throw ShapeError("dataset '" + name_ + "' has mixed image shapes; fetch images one by one");
    }
    return stacked_.index_select(0, index_tensor(indices)).to(torch::kFloat).div_(255.0);
}

torch::Tensor Dataset::labels(std::span<const int64_t> indices) const {
    if (!labels_.defined()) {
        throw LoadError("dataset '" + name_ + "' has no labels");
    }
    return labels_.index_select(0, index_tensor(indices));
}

std::vector<int64_t> Dataset::image_shape() const {
    if (!stacked_.defined()) {
        throw ShapeError("dataset '" + name_ + "' has mixed image shapes");
    }
    return {stacked_.size(1), stacked_.size(2), stacked_.size(3)};
}

Dataset Dataset::head(int64_t count) const {
    if (count <= 0 || count >= size()) {
        return *this;
    }
    if (stacked_.defined()) {
        return Dataset(name_, split_, stacked_.narrow(0, 0, count),
                       labels_.defined() ? labels_.narrow(0, 0, count) : torch::Tensor{});
    }
    return Dataset(name_, split_,
                   std::vector<torch::Tensor>(items_.begin(), items_.begin() + count));
}

std::vector<int64_t> Dataset::epoch_order(uint64_t seed, int64_t epoch) const {
    std::vector<int64_t> order(static_cast<size_t>(size()));
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                      static_cast<uint32_t>(epoch), static_cast<uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// --- dataset loaders ----------------------------------------------------------------------

std::string resolve_data_root(const std::string& configured) {
    if (!configured.empty()) {
        return configured;
    }
    if (const char* env = std::getenv("DATA_ROOT"); env != nullptr && *env != '\0') {
        return env;
    }
    return "data";
}

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

constexpr int64_t kCifarPixels = 3 * 32 * 32;
constexpr int64_t kCifarRecord = 1 + kCifarPixels;

const char* kCifarLayout =
    "expected <root>/cifar-10-batches-bin/data_batch_{1..5}.bin and test_batch.bin "
    "(the CIFAR-10 binary distribution, 10000 records of 3073 bytes each)";

std::vector<fs::path> cifar_files(const fs::path& root, const std::string& split) {
    const auto dir = root / "cifar-10-batches-bin";
    if (split == "train") {
        std::vector<fs::path> files;
        for (int i = 1; i <= 5; ++i) {
            files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        }
        return files;
    }
    if (split == "test") {
        return {dir / "test_batch.bin"};
    }
    throw ConfigError("cifar10 split must be 'train' or 'test', got '" + split + "'");
}

Dataset load_cifar10(const fs::path& root, const std::string& split) {
    std::string bytes;
    for (const auto& file : cifar_files(root, split)) {
        if (!fs::exists(file)) {
            throw MissingPrerequisiteError("missing " + file.string() + "; " + kCifarLayout);
        }
        const auto chunk = read_file(file);
        if (chunk.size() % kCifarRecord != 0 || chunk.empty()) {
            throw LoadError("corrupt " + file.string() + ": size " +
                            std::to_string(chunk.size()) + " is not a multiple of 3073; " +
                            kCifarLayout);
        }
        bytes += chunk;
    }
    const auto n = static_cast<int64_t>(bytes.size()) / kCifarRecord;
    auto raw = torch::from_blob(bytes.data(), {n, kCifarRecord}, torch::kByte).clone();
    auto labels = raw.select(1, 0).to(torch::kLong);
    if (labels.max().item<int64_t>() > 9) {
        throw LoadError("corrupt CIFAR-10 data: label out of range; " + std::string(kCifarLayout));
    }
    auto images = raw.narrow(1, 1, kCifarPixels).reshape({n, 3, 32, 32}).contiguous();
    return Dataset("cifar10", split, images, labels);
}

const char* kStlLayout =
    "expected <root>/stl10_binary/{train,test}_X.bin and {train,test}_y.bin "
    "(the STL-10 binary distribution)";

Dataset load_stl10(const fs::path& root, const std::string& split) {
    if (split != "train" && split != "test") {
        throw ConfigError("stl10 split must be 'train' or 'test', got '" + split + "'");
    }
    const auto dir = root / "stl10_binary";
    const auto x_path = dir / (split + "_X.bin");
    const auto y_path = dir / (split + "_y.bin");
    if (!fs::exists(x_path) || !fs::exists(y_path)) {
        throw MissingPrerequisiteError("missing " + x_path.string() + " or " + y_path.string() + "; " +
                        kStlLayout);
    }
    auto xs = read_file(x_path);
    auto ys = read_file(y_path);
    constexpr int64_t kPixels = 3 * 96 * 96;
    if (xs.size() % kPixels != 0 || xs.size() / kPixels != ys.size()) {
        throw LoadError("corrupt STL-10 files under " + dir.string() + "; " + kStlLayout);
    }
    const auto n = static_cast<int64_t>(ys.size());
    // Stored column-major per channel: (N, c, w, h).
    auto images = torch::from_blob(xs.data(), {n, 3, 96, 96}, torch::kByte)
                      .transpose(2, 3)
                      .contiguous();
    auto labels = torch::from_blob(ys.data(), {n}, torch::kByte).to(torch::kLong) - 1;
    if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() > 9) {
        throw LoadError("corrupt STL-10 labels; " + std::string(kStlLayout));
    }
    return Dataset("stl10", split, images, labels);
}

Dataset load_kodak(const fs::path& root, const std::string& split) {
    if (split != "all" && split != "test") {
        throw ConfigError("kodak has a single split 'all', got '" + split + "'");
    }
    std::vector<torch::Tensor> images;
    for (int i = 1; i <= 24; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "kodim%02d.png", i);
        const auto path = root / "kodak" / name;
        if (!fs::exists(path)) {
            throw MissingPrerequisiteError("missing " + path.string() +
                            "; expected <root>/kodak/kodim01.png .. kodim24.png");
        }
        images.push_back(read_png(path.string()));
    }
    return Dataset("kodak", "all", std::move(images));
}

}  // namespace

bool dataset_available(const std::string& name, const std::string& root) {
    const fs::path base(root);
    if (name == "synthetic") {
        return true;
    }
    if (name == "cifar10") {
        for (const auto& split : {"train", "test"}) {
            for (const auto& f : cifar_files(base, split)) {
                if (!fs::exists(f)) {
                    return false;
                }
            }
        }
        return true;
    }
    if (name == "stl10") {
        return fs::exists(base / "stl10_binary" / "train_X.bin") &&
               fs::exists(base / "stl10_binary" / "train_y.bin");
    }
    if (name == "kodak") {
        return fs::exists(base / "kodak" / "kodim01.png") &&
               fs::exists(base / "kodak" / "kodim24.png");
    }
    return false;
}

Dataset load_dataset(const std::string& name, const std::string& split, const std::string& root) {
    const fs::path base(root);
    if (name == "cifar10") {
        return load_cifar10(base, split);
    }
    if (name == "stl10") {
        return load_stl10(base, split);
    }
    if (name == "kodak") {
        return load_kodak(base, split);
    }
    if (name == "synthetic") {
        // Fixed sizes so train and test splits mirror a tiny CIFAR-like task.
        if (split == "train") {
            return synthetic_dataset(2000, 1);
        }
        if (split == "test") {
            return synthetic_dataset(500, 2);
        }
        throw ConfigError("synthetic split must be 'train' or 'test'");
    }
    throw ConfigError("unknown dataset '" + name + "' (expected cifar10, stl10, kodak or synthetic)");
}

Dataset synthetic_dataset(int64_t count, uint64_t seed, int64_t num_classes, int64_t height,
                          int64_t width) {
    if (count < 1 || num_classes < 2) {
        throw ConfigError("synthetic dataset needs count >= 1 and >= 2 classes");
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    auto opts = torch::TensorOptions().dtype(torch::kFloat);

    auto labels = at::randint(num_classes, {count}, gen, torch::TensorOptions().dtype(torch::kLong));
    auto cls = labels.to(torch::kFloat);

    const double pi = std::numbers::pi;
    auto angle = cls * (pi / static_cast<double>(num_classes));
    auto freq = 1.0 + torch::remainder(cls, 3.0);
    auto phase = at::rand({count}, gen, opts) * (2.0 * pi);
    auto amplitude = 0.25 + 0.15 * at::rand({count}, gen, opts);

    // Class colour: three phase-shifted cosines over the class index.
    auto hue = cls * (2.0 * pi / static_cast<double>(num_classes));
    auto colour = torch::stack({0.5 + 0.5 * torch::cos(hue), 0.5 + 0.5 * torch::cos(hue + 2.1),
                                0.5 + 0.5 * torch::cos(hue + 4.2)},
                               1);  // (N, 3)

    auto ys = torch::arange(height, opts).view({1, height, 1}) / static_cast<double>(height);
    auto xs = torch::arange(width, opts).view({1, 1, width}) / static_cast<double>(width);
    auto proj = xs * torch::cos(angle).view({-1, 1, 1}) + ys * torch::sin(angle).view({-1, 1, 1});
    auto wave = torch::sin(2.0 * pi * freq.view({-1, 1, 1}) * proj + phase.view({-1, 1, 1}));
    auto base = 0.5 + amplitude.view({-1, 1, 1}) * wave;  // (N, h, w)

    auto img = base.unsqueeze(1) * (0.4 + 0.6 * colour.view({-1, 3, 1, 1}));
    img = img + 0.04 * at::randn({count, 3, height, width}, gen, opts);
    auto bytes = (img.clamp(0.0, 1.0) * 255.0).round().to(torch::kByte);
    return Dataset("synthetic", "generated", bytes, labels);
}

// --- PNG ----------------------------------------------------------------------------------

torch::Tensor read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw LoadError("cannot read PNG " + path + ": " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw LoadError("cannot decode PNG " + path + ": " + image.message);
    }
    const auto h = static_cast<int64_t>(image.height);
    const auto w = static_cast<int64_t>(image.width);
    return torch::from_blob(buffer.data(), {h, w, 3}, torch::kByte).permute({2, 0, 1}).contiguous();
}

void write_png(const std::string& path, const torch::Tensor& img) {
    if (img.dim() != 3 || (img.size(0) != 3 && img.size(0) != 1)) {
        throw ShapeError("write_png expects (3, h, w) or (1, h, w), got " + c10::str(img.sizes()));
    }
    auto hwc = (img.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0)
                   .round()
                   .to(torch::kByte)
                   .permute({1, 2, 0})
                   .contiguous();
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.size(2));
    image.height = static_cast<png_uint_32>(img.size(1));
    image.format = img.size(0) == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, hwc.data_ptr<uint8_t>(), 0, nullptr)) {
        throw LoadError("cannot write PNG " + path + ": " + image.message);
    }
}

// --- hashing ------------------------------------------------------------------------------

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
            throw Error("SHA-256 initialization failed");
        }
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t size) { EVP_DigestUpdate(ctx_, data, size); }
    void update(const std::string& s) { update(s.data(), s.size()); }

    std::string digest() {
        unsigned char out[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, out, &len);
        return std::string(reinterpret_cast<char*>(out), len);
    }

private:
    EVP_MD_CTX* ctx_;
};

std::string to_hex(const std::string& raw) {
    static const char* digits = "0123456789abcdef";
    std::string hex;
    hex.reserve(raw.size() * 2);
    for (unsigned char c : raw) {
        hex.push_back(digits[c >> 4]);
        hex.push_back(digits[c & 0xF]);
    }
    return hex;
}

void hash_tensor(Sha256& h, const std::string& name, const torch::Tensor& t) {
    auto cpu = t.detach().to(torch::kCPU).contiguous();
    h.update(name);
    h.update(c10::str(cpu.sizes(), cpu.scalar_type()));
    h.update(cpu.data_ptr(), cpu.nbytes());
}

}  // namespace

std::string sha256_hex(std::span<const unsigned char> bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return to_hex(h.digest());
}

std::string sha256_hex(const std::string& bytes) {
    Sha256 h;
    h.update(bytes);
    return to_hex(h.digest());
}

std::string sha256_file(const std::string& path) {
    return sha256_hex(read_file(path));
}

std::string module_hash(const torch::nn::Module& module, bool include_buffers) {
    Sha256 h;
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        hash_tensor(h, item.key(), item.value());
    }
    if (include_buffers) {
        for (const auto& item : module.named_buffers(/*recurse=*/true)) {
            hash_tensor(h, item.key(), item.value());
        }
    }
    return to_hex(h.digest());
}

// --- checkpoints --------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'E', 'M', 'C', 'O', 'M', 'C', 'K'};
constexpr size_t kDigestSize = 32;

uint8_t dtype_code(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat: return 0;
        case torch::kDouble: return 1;
        case torch::kLong: return 2;
        case torch::kByte: return 3;
        case torch::kInt: return 4;
        case torch::kBool: return 5;
        default: throw Error("checkpoint: unsupported tensor dtype " + std::string(c10::toString(t)));
    }
}

torch::ScalarType dtype_from_code(uint8_t code) {
    switch (code) {
        case 0: return torch::kFloat;
        case 1: return torch::kDouble;
        case 2: return torch::kLong;
        case 3: return torch::kByte;
        case 4: return torch::kInt;
        case 5: return torch::kBool;
        default: throw LoadError("checkpoint: unknown dtype code " + std::to_string(code));
    }
}

template <typename T>
void put_pod(std::string& out, T value) {
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
public:
    Reader(const std::string& data, size_t end) : data_(data), end_(end) {}

    template <typename T>
    T pod() {
        T value;
        need(sizeof(T));
        std::memcpy(&value, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string bytes(size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == end_; }

private:
    void need(size_t n) const {
        if (pos_ + n > end_) {
            throw LoadError("checkpoint: malformed record (reads past end of payload)");
        }
    }

    const std::string& data_;
    size_t end_;
    size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put_module(const std::string& prefix, const torch::nn::Module& module) {
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        tensors[prefix + "." + item.key()] = item.value().detach().to(torch::kCPU).clone();
    }
    for (const auto& item : module.named_buffers(/*recurse=*/true)) {
        tensors[prefix + "." + item.key()] = item.value().detach().to(torch::kCPU).clone();
    }
}

void Checkpoint::get_module(const std::string& prefix, torch::nn::Module& module) const {
    torch::NoGradGuard no_grad;
    auto copy_into = [&](const std::string& name, torch::Tensor target) {
        const auto key = prefix + "." + name;
        auto it = tensors.find(key);
        if (it == tensors.end()) {
            throw IncompatibleError("checkpoint has no entry '" + key + "'");
        }
        if (it->second.sizes() != target.sizes()) {
            throw IncompatibleError("checkpoint entry '" + key + "' has shape " +
                                    c10::str(it->second.sizes()) + ", model expects " +
                                    c10::str(target.sizes()));
        }
        target.copy_(it->second);
    };
    for (auto& item : module.named_parameters(/*recurse=*/true)) {
        copy_into(item.key(), item.value());
    }
    for (auto& item : module.named_buffers(/*recurse=*/true)) {
        copy_into(item.key(), item.value());
    }
}

bool Checkpoint::has_module(const std::string& prefix) const {
    const auto key = prefix + ".";
    auto it = tensors.lower_bound(key);
    return it != tensors.end() && it->first.compare(0, key.size(), key) == 0;
}

void Checkpoint::put_bytes(const std::string& name, const std::string& bytes) {
    auto t = torch::empty({static_cast<int64_t>(bytes.size())}, torch::kByte);
    std::memcpy(t.data_ptr<uint8_t>(), bytes.data(), bytes.size());
    tensors[name] = t;
}

std::string Checkpoint::get_bytes(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw IncompatibleError("checkpoint has no entry '" + name + "'");
    }
    auto t = it->second.contiguous();
    return std::string(reinterpret_cast<const char*>(t.data_ptr<uint8_t>()),
                       static_cast<size_t>(t.numel()));
}

std::string save_checkpoint(Checkpoint& checkpoint, const std::string& path) {
    std::string out(kMagic, sizeof(kMagic));
    put_pod<uint32_t>(out, kCheckpointFormatVersion);
    const auto meta = checkpoint.metadata.dump();
    put_pod<uint64_t>(out, meta.size());
    out += meta;
    put_pod<uint64_t>(out, checkpoint.tensors.size());
    for (const auto& [name, tensor] : checkpoint.tensors) {
        auto cpu = tensor.detach().to(torch::kCPU).contiguous();
        put_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out += name;
        put_pod<uint8_t>(out, dtype_code(cpu.scalar_type()));
        put_pod<uint32_t>(out, static_cast<uint32_t>(cpu.dim()));
        for (auto d : cpu.sizes()) {
            put_pod<int64_t>(out, d);
        }
        put_pod<uint64_t>(out, cpu.nbytes());
        out.append(static_cast<const char*>(cpu.data_ptr()), cpu.nbytes());
    }
    Sha256 h;
    h.update(out);
    const auto digest = h.digest();
    out += digest;

    const fs::path target(path);
    if (target.has_parent_path()) {
        fs::create_directories(target.parent_path());
    }
    const auto tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw LoadError("cannot write checkpoint " + tmp);
        }
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) {
            throw LoadError("short write on checkpoint " + tmp);
        }
    }
    fs::rename(tmp, target);
    checkpoint.content_hash = to_hex(digest);
    return checkpoint.content_hash;
}

Checkpoint load_checkpoint(const std::string& path) {
    if (!fs::exists(path)) {
        throw MissingPrerequisiteError("checkpoint not found: " + path);
    }
    const auto data = read_file(path);
    if (data.size() < sizeof(kMagic) || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
        throw LoadError(path + " is not a semcom checkpoint (bad magic)");
    }
    if (data.size() < sizeof(kMagic) + sizeof(uint32_t) + kDigestSize) {
        throw IntegrityError(path + ": checkpoint is truncated");
    }
    const size_t payload = data.size() - kDigestSize;
    Sha256 h;
    h.update(data.data(), payload);
    const auto digest = h.digest();
    if (digest != data.substr(payload)) {
        throw IntegrityError(path + ": content hash mismatch (file truncated or corrupted)");
    }

    Reader r(data, payload);
    r.bytes(sizeof(kMagic));
    const auto version = r.pod<uint32_t>();
    if (version != kCheckpointFormatVersion) {
        throw LoadError(path + ": unsupported checkpoint format version " +
                        std::to_string(version));
    }
    Checkpoint ck;
    const auto meta_len = r.pod<uint64_t>();
    try {
        ck.metadata = nlohmann::json::parse(r.bytes(meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path + ": bad checkpoint metadata: " + e.what());
    }
    const auto count = r.pod<uint64_t>();
    for (uint64_t i = 0; i < count; ++i) {
        const auto name = r.bytes(r.pod<uint32_t>());
        const auto dtype = dtype_from_code(r.pod<uint8_t>());
        const auto ndim = r.pod<uint32_t>();
        std::vector<int64_t> dims(ndim);
        for (auto& d : dims) {
            d = r.pod<int64_t>();
        }
        const auto nbytes = r.pod<uint64_t>();
        auto bytes = r.bytes(nbytes);
        auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
        if (t.nbytes() != nbytes) {
            throw LoadError(path + ": tensor '" + name + "' size does not match its shape");
        }
        std::memcpy(t.data_ptr(), bytes.data(), nbytes);
        ck.tensors.emplace(name, std::move(t));
    }
    if (!r.done()) {
        throw LoadError(path + ": trailing bytes after tensor records");
    }
    ck.content_hash = to_hex(digest);
    return ck;
}

std::vector<std::string> checkpoint_lineage(const std::string& path) {
    std::vector<std::string> chain;
    std::string current = path;
    std::string expected_hash;
    while (!current.empty()) {
        auto ck = load_checkpoint(current);
        if (!expected_hash.empty() && ck.content_hash != expected_hash) {
            throw IntegrityError("lineage broken at " + current + ": expected hash " +
                                 expected_hash + ", found " + ck.content_hash);
        }
        chain.push_back(ck.content_hash);
        expected_hash = ck.metadata.value("parent_hash", std::string{});
        std::string parent = ck.metadata.value("parent_path", std::string{});
        if (!parent.empty() && fs::path(parent).is_relative()) {
            parent = (fs::path(current).parent_path() / parent).string();
        }
        current = expected_hash.empty() ? std::string{} : parent;
        if (chain.size() > 1000) {
            throw IntegrityError("lineage chain too long (cycle?) starting at " + path);
        }
    }
    return chain;
}

}  // namespace semcom
