/** Wire types for the /v1 triage API. Field names match the server exactly. */

export interface Thresholds {
  t_ood: number;
  t_triage: number;
}

export interface Decision {
  pred_l1: string;
  pred_l2: string;
  pred_l3: string;
  conf_l1: number;
  conf_l2: number;
  conf_l3: number;
  ood_alert: boolean;
  triage_recommended: boolean;
  min_proto_distance: number | null;
  thresholds_used: Thresholds;
  modality_used: 'clinical' | 'combined';
  hierarchy_consistent: boolean;
}

export interface SessionResponse {
  session_id: string;
  status: 'awaiting_decision' | 'complete';
  decision: Decision;
  combined?: Decision;
}

export interface TaxonomyEntry {
  name: string;
  parent: string;
  id?: boolean;
}

export interface TaxonomyResponse {
  level1: string[];
  level2: TaxonomyEntry[];
  level3: TaxonomyEntry[];
}

export interface ModelInfo {
  variant: string;
  modalities: string[];
  image_size: number;
  checkpoint_digest: string;
  thresholds: Thresholds | null;
}

export interface ApiErrorBody {
  error: string;
  message: string;
}
