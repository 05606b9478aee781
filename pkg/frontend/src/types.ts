/** Client-side mirror of the scan service response schemas. */

export type SeverityLevel = "none" | "low" | "moderate" | "high";

export const METRIC_NAMES = [
  "avg_tortuosity",
  "max_tortuosity",
  "segments_used",
  "retinopathy_grade",
  "edema_risk",
  "glaucoma_score",
  "drusen_score",
  "pigmentary_abnormalities",
  "late_amd",
  "geographic_atrophy",
  "central_geographic_atrophy",
  "amd_grade",
] as const;

export type MetricName = (typeof METRIC_NAMES)[number];

export interface UserProfile {
  user_id: string;
  display_name: string;
  created_at: string;
}

export interface AmdMetrics {
  drusen_score: number;
  pigmentary_abnormalities: number;
  late_amd: number;
  geographic_atrophy: number;
  central_geographic_atrophy: number;
  amd_grade: number;
  defaulted: boolean;
}

export interface GradingMetrics {
  retinopathy_grade: number;
  edema_risk: number;
  glaucoma_score: number;
  amd: AmdMetrics;
  produced_by: string;
  produced_at: string;
}

export interface TortuositySummary {
  avg_tortuosity: number | null;
  max_tortuosity: number | null;
  segments_used: number;
}

export interface NoteEntry {
  text: string;
  created_at: string;
}

export interface ScanRecord {
  scan_id: string;
  user_id: string;
  captured_at: string;
  image_ref: string;
  metrics: GradingMetrics;
  tortuosity: TortuositySummary;
  notes: NoteEntry[];
  idempotency_key: string | null;
}

export interface TrendAlert {
  metric_name: string;
  at: string;
  baseline: number;
  observed: number;
  delta: number;
  direction: "up" | "down";
}

export interface ScanResponse {
  scan: ScanRecord;
  severities: Record<string, SeverityLevel>;
  alerts: TrendAlert[];
  replay: boolean;
}

export interface TrendPoint {
  at: string;
  value: number;
}

export interface CalendarCell {
  scans: number;
  worst_severity: SeverityLevel;
  alerts: number;
}

export interface CalendarResponse {
  year: number;
  month: number;
  days: Record<string, CalendarCell>;
}

export interface InterpretationResponse {
  text: string;
  source: "remote" | "fallback";
  disclaimer_included: boolean;
}
