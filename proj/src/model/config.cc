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

#include "exitpipe/model/config.h"

#include <charconv>
#include <cmath>
#include <sstream>

#include "exitpipe/error.h"

namespace exitpipe {

const char *HeadKindName(HeadKind kind) {
  switch (kind) {
    case HeadKind::kMinimalistic:
      return "minimalistic";
    case HeadKind::kNormEmbed:
      return "norm+embed";
    case HeadKind::kMlpEmbed:
      return "mlp+embed";
    case HeadKind::kLayerEmbed:
      return "layer+embed";
  }
  return "unknown";
}

HeadKind ParseHeadKind(const std::string &name) {
  for (HeadKind k : {HeadKind::kMinimalistic, HeadKind::kNormEmbed, HeadKind::kMlpEmbed, HeadKind::kLayerEmbed}) {
    if (name == HeadKindName(k)) {
      return k;
    }
  }
  throw Error(ErrorKind::kParse, "unknown head kind '" + name + "'");
}

std::vector<double> ModelConfig::loss_weights() const {
  std::vector<double> w;
  for (const auto &e : exits) {
    w.push_back(e.loss_weight);
  }
  w.push_back(final_loss_weight);
  return w;
}

void ValidateConfig(const ModelConfig &c) {
  auto fail = [](const std::string &msg) { throw Error(ErrorKind::kInvalidConfig, msg); };
  if (c.num_layers == 0 || c.hidden_dim == 0 || c.num_heads == 0 || c.vocab_size == 0 || c.max_seq_len == 0) {
    fail("num_layers, hidden_dim, num_heads, vocab_size and max_seq_len must be positive");
  }
  if (c.hidden_dim % c.num_heads != 0) {
    fail("hidden_dim " + std::to_string(c.hidden_dim) + " not divisible by num_heads " + std::to_string(c.num_heads));
  }
  if (!(std::isfinite(c.final_loss_weight) && c.final_loss_weight >= 0.0)) {
    fail("final loss weight must be finite and non-negative");
  }
  for (std::size_t j = 0; j < c.exits.size(); ++j) {
    const auto &e = c.exits[j];
    if (e.layer >= c.num_layers) {
      fail("exit layer " + std::to_string(e.layer) + " must be below num_layers (the final exit is implicit)");
    }
    if (j > 0 && e.layer <= c.exits[j - 1].layer) {
      fail("exit layers must be distinct and listed in increasing depth");
    }
    if (!(std::isfinite(e.loss_weight) && e.loss_weight >= 0.0)) {
      fail("exit loss weights must be finite and non-negative");
    }
  }
}

std::string FormatDouble(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  EXITPIPE_CHECK(ec == std::errc(), ErrorKind::kInternal, "cannot format double");
  return std::string(buf, end);
}

double ParseDouble(const std::string &text, const std::string &what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  EXITPIPE_CHECK(ec == std::errc() && ptr == text.data() + text.size(), ErrorKind::kParse,
                 what + ": expected a number, got '" + text + "'");
  return v;
}

std::size_t ParseSize(const std::string &text, const std::string &what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  EXITPIPE_CHECK(ec == std::errc() && ptr == text.data() + text.size(), ErrorKind::kParse,
                 what + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

bool ParseBool(const std::string &text, const std::string &what) {
  if (text == "true" || text == "1") {
    return true;
  }
  if (text == "false" || text == "0") {
    return false;
  }
  throw Error(ErrorKind::kParse, what + ": expected true or false, got '" + text + "'");
}

std::vector<ExitSpec> ParseExitList(const std::string &text) {
  std::vector<ExitSpec> out;
  if (text.empty() || text == "none") {
    return out;
  }
  std::stringstream items(text);
  std::string item;
  while (std::getline(items, item, ',')) {
    const auto a = item.find(':');
    const auto b = a == std::string::npos ? a : item.find(':', a + 1);
    EXITPIPE_CHECK(b != std::string::npos, ErrorKind::kParse, "exit '" + item + "' is not layer:kind:weight");
    ExitSpec e;
    e.layer = ParseSize(item.substr(0, a), "exit layer");
    e.kind = ParseHeadKind(item.substr(a + 1, b - a - 1));
    e.loss_weight = ParseDouble(item.substr(b + 1), "exit weight");
    out.push_back(e);
  }
  return out;
}

std::string FormatExitList(const std::vector<ExitSpec> &exits) {
  if (exits.empty()) {
    return "none";
  }
  std::string out;
  for (const auto &e : exits) {
    if (!out.empty()) {
      out += ',';
    }
    out += std::to_string(e.layer) + ':' + HeadKindName(e.kind) + ':' + FormatDouble(e.loss_weight);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> ConfigToKeyValues(const ModelConfig &c) {
  return {
      {"num_layers", std::to_string(c.num_layers)},
      {"hidden_dim", std::to_string(c.hidden_dim)},
      {"num_heads", std::to_string(c.num_heads)},
      {"vocab_size", std::to_string(c.vocab_size)},
      {"max_seq_len", std::to_string(c.max_seq_len)},
      {"exits", FormatExitList(c.exits)},
      {"tie_embeddings", c.tie_embeddings ? "true" : "false"},
      {"final_loss_weight", FormatDouble(c.final_loss_weight)},
  };
}

bool ApplyConfigKey(ModelConfig &c, const std::string &key, const std::string &value) {
  if (key == "num_layers") {
    c.num_layers = ParseSize(value, key);
  } else if (key == "hidden_dim") {
    c.hidden_dim = ParseSize(value, key);
  } else if (key == "num_heads") {
    c.num_heads = ParseSize(value, key);
  } else if (key == "vocab_size") {
    c.vocab_size = ParseSize(value, key);
  } else if (key == "max_seq_len") {
    c.max_seq_len = ParseSize(value, key);
  } else if (key == "exits") {
    c.exits = ParseExitList(value);
  } else if (key == "tie_embeddings") {
    c.tie_embeddings = ParseBool(value, key);
  } else if (key == "final_loss_weight") {
    c.final_loss_weight = ParseDouble(value, key);
  } else {
    return false;
  }
  return true;
}

}  // namespace exitpipe
