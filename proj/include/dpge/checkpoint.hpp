/*
 * Copyright 2026 The DPGE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#ifndef DPGE_CHECKPOINT_HPP_
#define DPGE_CHECKPOINT_HPP_

#include <cstdint>
#include <string>

#include "dpge/model.hpp"

// Checkpoint file format, bit-exact:
//   bytes 0..7   magic "DPGE0001"
//   bytes 8..15  length N of the metadata block, little-endian uint64
//   N bytes      UTF-8 JSON metadata: model config, parameter registry,
//                training step, RNG seeds, accounted epsilon
//   rest         parameter values, IEEE-754 binary32 little-endian, in
//                registry order

namespace dpge::model {

struct CheckpointSeeds {
  std::uint64_t init = 0;
  std::uint64_t data = 0;
  std::uint64_t noise = 0;
  std::uint64_t dropout = 0;
};

struct Checkpoint {
  ModelConfig config;
  ParamVector params;
  std::uint64_t step = 0;
  CheckpointSeeds seeds;
  double epsilon_spent = 0.0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Validates magic, metadata and the registry tiling; throws IoError or
// ValidationError on malformed files.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dpge::model

#endif  // DPGE_CHECKPOINT_HPP_
