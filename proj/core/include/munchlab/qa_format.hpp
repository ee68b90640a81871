// Copyright 2026 The munchlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// How question/answer text becomes model input. Shared by pretraining,
// unlearning, evaluation and the MUNCH pipeline so all of them agree on
// the exact token layout:
//
//   prompt = <bos> question-words
//   target = answer-words <eos>

#include <string>

#include "munchlab/seqmodel.hpp"

namespace munchlab {

inline seqmodel::TokenSequence qa_prompt(const seqmodel::Vocabulary& vocab,
                                         const std::string& question) {
  seqmodel::TokenSequence p{seqmodel::kBos};
  const auto q = vocab.tokenize(question);
  p.insert(p.end(), q.begin(), q.end());
  return p;
}

inline seqmodel::TokenSequence qa_target(const seqmodel::Vocabulary& vocab,
                                         const std::string& answer) {
  seqmodel::TokenSequence t = vocab.tokenize(answer);
  t.push_back(seqmodel::kEos);
  return t;
}

inline seqmodel::Example qa_example(const seqmodel::Vocabulary& vocab, const std::string& question,
                                    const std::string& answer) {
  return {qa_prompt(vocab, question), qa_target(vocab, answer)};
}

}  // namespace munchlab
