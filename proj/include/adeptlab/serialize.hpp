#pragma once

#include <string>
#include <vector>

#include "adeptlab/backbone.hpp"
#include "adeptlab/dataset.hpp"
#include "adeptlab/peft.hpp"

namespace adeptlab {

// Checkpoints are single JSON documents. Every fp64 value is written as
// the shortest decimal string that parses back to the identical double,
// so save -> load is value-exact and byte-stable for equal state.

std::string backbone_to_json(const BackboneModel& model);
void save_backbone(const BackboneModel& model, const std::string& path);
BackboneModel load_backbone(const std::string& path);

std::string method_to_json(const PeftMethod& method);
void save_method(const PeftMethod& method, const std::string& path);
PeftMethod load_method(const std::string& path);

// Example lists travel as JSON lines, one {"ids":[...],"label":0|1}
// object per line.
void save_examples(const std::vector<Example>& examples, const std::string& path);
std::vector<Example> load_examples(const std::string& path);

}  // namespace adeptlab
