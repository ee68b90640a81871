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

// Line-JSON decomposer used by the tests: splits the question after each
// '?' and echoes the id back.

#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

int main() {
  std::string line;
  while (std::getline(std::cin, line)) {
    const auto req = nlohmann::json::parse(line);
    const std::string q = req.at("question");
    nlohmann::json subs = nlohmann::json::array();
    std::string cur;
    for (char c : q) {
      if (cur.empty() && c == ' ') continue;
      cur += c;
      if (c == '?') {
        subs.push_back(cur);
        cur.clear();
      }
    }
    std::cout << nlohmann::json{{"id", req.at("id")}, {"subquestions", subs}}.dump() << std::endl;
  }
}
