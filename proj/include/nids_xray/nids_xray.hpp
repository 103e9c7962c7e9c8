#pragma once

#include "nids_xray/agreement.hpp"
#include "nids_xray/autoencoder.hpp"
#include "nids_xray/cart.hpp"
#include "nids_xray/common.hpp"
#include "nids_xray/config.hpp"
#include "nids_xray/dis.hpp"
#include "nids_xray/distill.hpp"
#include "nids_xray/ensemble.hpp"
#include "nids_xray/kernel_shap.hpp"
#include "nids_xray/matrix.hpp"
#include "nids_xray/model.hpp"
#include "nids_xray/models.hpp"
#include "nids_xray/packet.hpp"
#include "nids_xray/pipeline.hpp"
#include "nids_xray/synthetic.hpp"
#include "nids_xray/tamper.hpp"
#include "nids_xray/trace_io.hpp"
