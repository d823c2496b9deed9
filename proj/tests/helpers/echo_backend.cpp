// Stub external segmentation backend used by the protocol tests: reads the
// request directory given as the last argument and echoes the prompt mask
// back as the output mask. Failure modes for the error-path tests are
// selected with --mode=.
//
//   --mode=echo       copy the prompt mask (or an all-zero mask) to output
//   --mode=wrongdims  write a mask with mismatched geometry
//   --mode=fail       exit nonzero without output
//   --mode=hang       sleep forever (timeout test)

#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "atlasfuse/mvol.hpp"
#include "atlasfuse/volume.hpp"

using json = nlohmann::json;
using namespace atlasfuse;

int main(int argc, char** argv) {
  std::string mode = "echo";
  std::string dir;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--mode=", 0) == 0) mode = arg.substr(7);
    else dir = arg;
  }
  if (dir.empty()) {
    std::cerr << "echo_backend: missing request directory\n";
    return 2;
  }
  if (mode == "fail") {
    std::cerr << "echo_backend: simulated failure\n";
    return 3;
  }
  if (mode == "hang") {
    std::this_thread::sleep_for(std::chrono::hours(1));
    return 0;
  }

  try {
    std::ifstream rf(dir + "/request.json");
    json req;
    rf >> req;
    const Volume query = read_mvol_volume(dir + "/" + req.at("volume").get<std::string>());
    const std::string out_name = req.at("expected_output").get<std::string>();

    ProbMask out = ProbMask::filled(query.geom, 0.0f);
    if (!req.at("prompt").is_null() && req["prompt"].contains("mask_file")) {
      const LabelMask prompt_mask =
          read_mvol_mask(dir + "/" + req["prompt"]["mask_file"].get<std::string>());
      std::vector<float> v(prompt_mask.labels.size());
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = prompt_mask.labels[i] != 0 ? 1.0f : 0.0f;
      out = ProbMask(prompt_mask.geom, std::move(v));
    }

    if (mode == "wrongdims") {
      GridGeometry bad = out.geom;
      bad.dims[0] += 1;
      out = ProbMask::filled(bad, 0.0f);
    }
    write_mvol(out, dir + "/" + out_name);
    return 0;
  } catch (const std::exception& ex) {
    std::cerr << "echo_backend: " << ex.what() << "\n";
    return 4;
  }
}
