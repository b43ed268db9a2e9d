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
#include "dpge/telemetry.hpp"

#include <cmath>
#include <sstream>

#include <doctest.h>

#include "dpge/error.hpp"
#include "dpge/rng.hpp"

using namespace dpge;
using namespace dpge::telemetry;

TEST_CASE("gradient_snr: ratio of norms") {
  const std::vector<double> signal = {3.0, 4.0};
  const std::vector<double> noise = {0.0, 0.5};
  CHECK(gradient_snr(signal, noise) == doctest::Approx(10.0).epsilon(1e-12));

  const std::vector<double> zero = {0.0, 0.0};
  CHECK(gradient_snr(zero, noise) == 0.0);
  CHECK_THROWS_AS(gradient_snr(signal, zero), ValidationError);
}

TEST_CASE("gradient_snr: homogeneous in the signal, rotation invariant") {
  rng::Stream stream(3, 0);
  std::vector<double> s(8), n(8);
  for (auto& v : s) v = stream.normal();
  for (auto& v : n) v = stream.normal();
  const double base = gradient_snr(s, n);

  auto scaled = s;
  for (auto& v : scaled) v *= 3.5;
  CHECK(gradient_snr(scaled, n) == doctest::Approx(3.5 * base).epsilon(1e-12));

  // apply the same Givens rotation to both arguments
  auto sr = s;
  auto nr = n;
  const double c = std::cos(0.7), t = std::sin(0.7);
  for (auto* vec : {&sr, &nr}) {
    const double a = (*vec)[2], b = (*vec)[5];
    (*vec)[2] = c * a - t * b;
    (*vec)[5] = t * a + c * b;
  }
  CHECK(gradient_snr(sr, nr) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("mlm accuracy: argmax semantics") {
  // 3 positions over a 4-token vocabulary
  const std::vector<float> logits = {
      0.1f, 0.9f, 0.0f, 0.0f,  // argmax 1
      2.0f, 0.0f, 0.0f, 0.0f,  // argmax 0
      0.0f, 0.0f, 0.5f, 0.5f,  // tie -> smallest index 2
  };
  const std::vector<std::int32_t> targets = {1, 0, 2};
  CHECK(mlm_accuracy(logits, targets, 4) == doctest::Approx(1.0));

  const std::vector<std::int32_t> all_wrong = {0, 1, 3};
  CHECK(mlm_accuracy(logits, all_wrong, 4) == doctest::Approx(0.0));

  const std::vector<std::int32_t> mixed = {1, 0, 3};
  CHECK(mlm_accuracy(logits, mixed, 4) == doctest::Approx(2.0 / 3.0));

  // no masked positions: absent, not zero
  CHECK(!mlm_accuracy({}, {}, 4).has_value());
  CHECK(!accuracy_from_predictions({}, {}).has_value());
}

TEST_CASE("nsp accuracy") {
  const std::vector<float> logits = {0.2f, 0.8f, 0.9f, 0.1f};
  const std::vector<std::int32_t> labels = {1, 0};
  CHECK(nsp_accuracy(logits, labels) == doctest::Approx(1.0));
  const std::vector<std::int32_t> flipped = {0, 1};
  CHECK(nsp_accuracy(logits, flipped) == doctest::Approx(0.0));
  CHECK(!nsp_accuracy({}, {}).has_value());
}

TEST_CASE("macro_f1: closed forms and symmetry") {
  const std::vector<int> perfect = {0, 1, 0, 1};
  CHECK(macro_f1(perfect, perfect, 2) == doctest::Approx(1.0));

  // balanced truth, everything predicted positive: (2/3 + 0)/2 = 1/3
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<int> all_pos = {1, 1, 1, 1};
  CHECK(macro_f1(all_pos, labels, 2) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // permuting class names on both sides leaves macro-F1 unchanged
  rng::Stream stream(9, 0);
  std::vector<int> p(12), l(12);
  for (auto& v : p) v = static_cast<int>(stream.uniform_int(2));
  for (auto& v : l) v = static_cast<int>(stream.uniform_int(2));
  auto p_swapped = p;
  auto l_swapped = l;
  for (auto& v : p_swapped) v = 1 - v;
  for (auto& v : l_swapped) v = 1 - v;
  CHECK(macro_f1(p, l, 2) == doctest::Approx(macro_f1(p_swapped, l_swapped, 2)).epsilon(1e-15));

  CHECK_THROWS_AS(macro_f1({}, {}, 2), ValidationError);
  const std::vector<int> out_of_range = {0, 2};
  const std::vector<int> ok_labels = {0, 1};
  CHECK_THROWS_AS(macro_f1(out_of_range, ok_labels, 2), ValidationError);
}

TEST_CASE("macro_f1 equals a brute-force confusion-matrix computation") {
  // exhaustive over all binary (prediction, label) pairs of length <= 4 here;
  // the acceptance suite extends this to length 6
  for (int n = 1; n <= 4; ++n) {
    for (int pm = 0; pm < (1 << n); ++pm) {
      for (int lm = 0; lm < (1 << n); ++lm) {
        std::vector<int> preds(static_cast<std::size_t>(n)), labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
          preds[static_cast<std::size_t>(i)] = (pm >> i) & 1;
          labels[static_cast<std::size_t>(i)] = (lm >> i) & 1;
        }
        // independent oracle: build the full confusion matrix first
        int confusion[2][2] = {{0, 0}, {0, 0}};
        for (int i = 0; i < n; ++i) {
          ++confusion[labels[static_cast<std::size_t>(i)]][preds[static_cast<std::size_t>(i)]];
        }
        double want = 0.0;
        for (int c = 0; c < 2; ++c) {
          const int tp = confusion[c][c];
          const int fp = confusion[1 - c][c];
          const int fn = confusion[c][1 - c];
          const int denom = 2 * tp + fp + fn;
          want += denom == 0 ? 0.0 : 2.0 * tp / static_cast<double>(denom);
        }
        want /= 2.0;
        CHECK(macro_f1(preds, labels, 2) == want);
      }
    }
  }
}

TEST_CASE("metrics CSV: header, optionals, 9-digit round trip, row order") {
  std::vector<MetricsRecord> records(2);
  records[0].step = 1;
  records[0].train_loss = 1.0 / 3.0;
  records[0].lr = 0.00012345678912345;
  records[0].batch_size = 64;
  records[1].step = 2;
  records[1].train_loss = 2.5;
  records[1].eval_loss = 2.25;
  records[1].mlm_acc = 0.5;
  records[1].nsp_acc = 0.75;
  records[1].snr = 12.5;
  records[1].epsilon_spent = 4.999999999;
  records[1].lr = 0.001;
  records[1].batch_size = 64;

  std::ostringstream out;
  emit_metrics_csv(records, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,train_loss,eval_loss,mlm_acc,nsp_acc,snr,epsilon_spent,lr,batch_size");
  std::getline(in, line);
  // absent optionals serialize as empty fields
  CHECK(line.substr(0, 2) == "1,");
  CHECK(line.find(",,,,,,") != std::string::npos);
  std::getline(in, line);
  CHECK(line.substr(0, 2) == "2,");

  // round trip at 9 significant digits
  std::istringstream in2(out.str());
  std::getline(in2, line);  // header
  std::getline(in2, line);
  double train_loss = 0.0, lr = 0.0;
  std::sscanf(line.c_str(), "1,%lf,,,,,,%lf,64", &train_loss, &lr);
  CHECK(std::abs(train_loss - records[0].train_loss) <= 1e-9 * records[0].train_loss);
  CHECK(std::abs(lr - records[0].lr) <= 1e-9 * records[0].lr);

  // header-only file for an empty record list
  std::ostringstream empty;
  emit_metrics_csv({}, empty);
  CHECK(empty.str() == "step,train_loss,eval_loss,mlm_acc,nsp_acc,snr,epsilon_spent,lr,batch_size\n");
}

TEST_CASE("snr CSV schema") {
  std::vector<SnrRecord> records = {{1, 10.5, 64, 0.001}, {2, 9.25, 64, 0.002}};
  std::ostringstream out;
  emit_snr_csv(records, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,snr,batch_size,lr");
  std::getline(in, line);
  CHECK(line == "1,10.5,64,0.001");
}
