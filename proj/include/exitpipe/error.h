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

#ifndef EXITPIPE_ERROR_H_
#define EXITPIPE_ERROR_H_

#include <stdexcept>
#include <string>

namespace exitpipe {

enum class ErrorKind {
  kShapeMismatch,
  kNonFinite,
  kInvalidToken,
  kInvalidArgument,
  kInvalidConfig,
  kTapeConsumed,
  kProtocolViolation,
  kContextOverflow,
  kParse,
  kIo,
  kInternal,
};

const char *ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string &message)
      : std::runtime_error(std::string(ErrorKindName(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define EXITPIPE_CHECK(cond, kind, msg)            \
  do {                                             \
    if (!(cond)) {                                 \
      throw ::exitpipe::Error((kind), (msg));      \
    }                                              \
  } while (false)

}  // namespace exitpipe

#endif  // EXITPIPE_ERROR_H_
