/**
 * Copyright 2026 The ExitPipe Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "exitpipe/model/checkpoint.h"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <set>

#include "exitpipe/error.h"

namespace exitpipe {
namespace {

constexpr char kMagic[] = "EXITPIPE";
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void U32(std::uint32_t v) { Le(v, 4); }
  void U64(std::uint64_t v) { Le(v, 8); }
  void F64(double v) { Le(std::bit_cast<std::uint64_t>(v), 8); }
  void Str(const std::string &s) {
    U32(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void Raw(const char *s, std::size_t n) { out_.append(s, n); }
  std::string take() { return std::move(out_); }

 private:
  void Le(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string &in) : in_(in) {}
  std::uint32_t U32() { return static_cast<std::uint32_t>(Le(4)); }
  std::uint64_t U64() { return Le(8); }
  double F64() { return std::bit_cast<double>(Le(8)); }
  std::string Str() {
    const std::size_t n = U32();
    Need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string Raw(std::size_t n) {
    Need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void Need(std::size_t n) const {
    EXITPIPE_CHECK(in_.size() - pos_ >= n, ErrorKind::kParse, "checkpoint truncated");
  }
  std::uint64_t Le(int bytes) {
    Need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  const std::string &in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string SerializeCheckpoint(const EarlyExitModel &model, const Metadata &metadata) {
  Writer w;
  w.Raw(kMagic, 8);
  w.U32(kVersion);
  auto kv = ConfigToKeyValues(model.config);
  kv.emplace_back("#model-end", "");
  kv.insert(kv.end(), metadata.begin(), metadata.end());
  w.U32(static_cast<std::uint32_t>(kv.size()));
  for (const auto &[k, v] : kv) {
    w.Str(k);
    w.Str(v);
  }
  w.U32(static_cast<std::uint32_t>(model.params.size()));
  std::uint64_t offset = 0;
  for (const auto &[name, t] : model.params) {
    w.Str(name);
    w.U32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      w.U64(d);
    }
    w.U64(offset);
    offset += t.numel();
  }
  for (const auto &[name, t] : model.params) {
    for (double v : t.data()) {
      w.F64(v);
    }
  }
  return w.take();
}

Checkpoint DeserializeCheckpoint(const std::string &bytes) {
  Reader r(bytes);
  EXITPIPE_CHECK(r.Raw(8) == std::string(kMagic, 8), ErrorKind::kParse, "not a checkpoint (bad magic)");
  const std::uint32_t version = r.U32();
  EXITPIPE_CHECK(version == kVersion, ErrorKind::kParse, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ModelConfig &config = ck.model.config;
  config = ModelConfig{};
  const std::uint32_t n = r.U32();
  bool in_model = true;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.Str();
    std::string v = r.Str();
    if (in_model && k == "#model-end") {
      in_model = false;
    } else if (in_model) {
      EXITPIPE_CHECK(ApplyConfigKey(config, k, v), ErrorKind::kParse, "unknown model key '" + k + "' in checkpoint");
    } else {
      ck.metadata.emplace_back(std::move(k), std::move(v));
    }
  }
  ValidateConfig(config);

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries(r.U32());
  std::uint64_t total = 0;
  for (auto &e : entries) {
    e.name = r.Str();
    const std::uint32_t rank = r.U32();
    EXITPIPE_CHECK(rank > 0 && rank <= 8, ErrorKind::kParse, "bad rank for tensor '" + e.name + "'");
    for (std::uint32_t d = 0; d < rank; ++d) {
      e.shape.push_back(r.U64());
    }
    e.offset = r.U64();
    total = std::max<std::uint64_t>(total, e.offset + NumElements(e.shape));
  }
  EXITPIPE_CHECK(r.remaining() == total * 8, ErrorKind::kParse, "checkpoint payload size does not match its table");
  std::vector<double> payload(total);
  for (double &v : payload) {
    v = r.F64();
  }
  for (const auto &e : entries) {
    const auto begin = payload.begin() + static_cast<std::ptrdiff_t>(e.offset);
    std::vector<double> data(begin, begin + static_cast<std::ptrdiff_t>(NumElements(e.shape)));
    ck.model.params.emplace(e.name, Tensor(e.shape, std::move(data)));
  }
  // The tensor set must be exactly what the config describes.
  std::set<std::string> expected;
  for (const auto &info : EnumerateParameters(config)) {
    expected.insert(info.name);
    auto it = ck.model.params.find(info.name);
    EXITPIPE_CHECK(it != ck.model.params.end(), ErrorKind::kParse, "checkpoint lacks tensor '" + info.name + "'");
    EXITPIPE_CHECK(it->second.shape() == info.shape, ErrorKind::kParse, "tensor '" + info.name + "' has wrong shape");
  }
  EXITPIPE_CHECK(expected.size() == ck.model.params.size(), ErrorKind::kParse, "checkpoint has unexpected tensors");
  return ck;
}

void SaveCheckpoint(const std::string &path, const EarlyExitModel &model, const Metadata &metadata) {
  std::ofstream out(path, std::ios::binary);
  EXITPIPE_CHECK(out.good(), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  const std::string bytes = SerializeCheckpoint(model, metadata);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  EXITPIPE_CHECK(out.good(), ErrorKind::kIo, "failed writing '" + path + "'");
}

Checkpoint LoadCheckpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  EXITPIPE_CHECK(in.good(), ErrorKind::kIo, "cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DeserializeCheckpoint(bytes);
}

}  // namespace exitpipe
