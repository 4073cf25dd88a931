// Copyright 2026 The devisp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Command-line front end. Kept in a library so tests can drive commands
// in-process and compare their outputs.

#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace devisp::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;  // library error; JSON on stderr
inline constexpr int kUsageError = 2;    // bad flags; JSON on stderr
inline constexpr int kCheckFailed = 3;   // gradcheck ran but a block failed

/// Complete default configuration: {"synth", "model", "train"} sections.
nlohmann::json default_config();

/// Default config, merged with `file` (when non-empty) and then with each
/// dotted override in order. Unknown keys are rejected. Setting model.scale
/// to toy or full resets the model section to that preset before later
/// overrides apply; custom keeps the current model keys.
nlohmann::json resolve_config(const std::string& file, const std::vector<std::string>& overrides);

/// Runs one command line (args[0] is the program name). Normal output goes to
/// `out`; warnings and the error JSON go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace devisp::cli
