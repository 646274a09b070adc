/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/skelterp.hpp
 *
 * Copyright 2026 The skelterp Authors
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
#ifndef SKELTERP_SKELTERP_HPP
#define SKELTERP_SKELTERP_HPP

#include "skelterp/common.hpp"
#include "skelterp/rotation.hpp"
#include "skelterp/skeleton.hpp"
#include "skelterp/camera.hpp"
#include "skelterp/heatmap.hpp"
#include "skelterp/synth.hpp"
#include "skelterp/mlp.hpp"
#include "skelterp/interpreter.hpp"
#include "skelterp/baseline.hpp"
#include "skelterp/metrics.hpp"
#include "skelterp/config.hpp"
#include "skelterp/experiment.hpp"

#endif // SKELTERP_SKELTERP_HPP
